"""Hash-chained block store and the executed-state key-value store.

Blocks hold batch metadata only (sequence, batch digest, view, previous-block
hash, transaction count); request bodies stay in per-instance consensus
metadata until checkpoint pruning releases them.  Blocks themselves are never
pruned.  The value table covers a fixed active set of integer keys and comes
in two backends: an in-memory array, and a SQLite file accessed synchronously
from the execute stage (one implicit transaction per operation).
"""

from __future__ import annotations

import sqlite3
import struct
from array import array
from dataclasses import dataclass
from pathlib import Path

from .crypto import hash_bytes, identity_digest
from .messages import Operation

_BLOCK = struct.Struct(">Q32sI32sI")  # seq, digest, view, prev_hash, txn_count


class OutOfOrderAppend(RuntimeError):
    """Append with a sequence gap: the pipeline's ordering broke."""


class KeyOutOfRange(IndexError):
    pass


@dataclass(slots=True, frozen=True)
class Block:
    seq: int
    digest: bytes
    view: int
    prev_hash: bytes
    txn_count: int

    def encode(self) -> bytes:
        return _BLOCK.pack(self.seq, self.digest, self.view, self.prev_hash, self.txn_count)

    def dump_line(self) -> str:
        return "%016x %s %08x %s %08x" % (
            self.seq, self.digest.hex(), self.view, self.prev_hash.hex(), self.txn_count,
        )


def genesis_block(first_primary: int) -> Block:
    return Block(seq=0, digest=bytes(32), view=0,
                 prev_hash=identity_digest(first_primary), txn_count=0)


class Blockchain:
    """Append-only chain; the genesis block links to the first primary's
    identity digest."""

    def __init__(self, first_primary: int):
        self.blocks: list[Block] = [genesis_block(first_primary)]
        self.latest_hash: bytes = hash_bytes(self.blocks[0].encode())

    @property
    def height(self) -> int:
        return len(self.blocks)

    @property
    def next_seq(self) -> int:
        last = self.blocks[-1]
        return last.seq + last.txn_count

    def append_block(self, seq: int, digest: bytes, view: int, txn_count: int) -> Block:
        if seq != self.next_seq:
            raise OutOfOrderAppend(f"expected seq {self.next_seq}, got {seq}")
        block = Block(seq, digest, view, self.latest_hash, txn_count)
        self.blocks.append(block)
        self.latest_hash = hash_bytes(block.encode())
        return block

    def dump(self) -> str:
        return "\n".join(b.dump_line() for b in self.blocks) + "\n"

    def write_dump(self, path: str | Path) -> None:
        Path(path).write_text(self.dump())


def validate_chain(chain: Blockchain | list[Block]) -> bool:
    """True iff every prev_hash link recomputes and coverage is contiguous."""
    blocks = chain.blocks if isinstance(chain, Blockchain) else chain
    if not blocks:
        return False
    for i in range(1, len(blocks)):
        prev = blocks[i - 1]
        cur = blocks[i]
        if cur.prev_hash != hash_bytes(prev.encode()):
            return False
        if cur.seq != prev.seq + prev.txn_count:
            return False
    return True


def parse_dump(text: str) -> list[Block]:
    blocks = []
    for line in text.splitlines():
        if not line.strip():
            continue
        seq, digest, view, prev_hash, txn_count = line.split()
        blocks.append(Block(int(seq, 16), bytes.fromhex(digest), int(view, 16),
                            bytes.fromhex(prev_hash), int(txn_count, 16)))
    return blocks


class StateStore:
    """Key -> 8-byte signed integer table over the active set.

    ``apply_operations`` returns one acknowledgment per op (the value written)
    and is the only mutation path; the executor owns it exclusively.
    """

    backend = "inmemory"

    def __init__(self, active_set: int):
        self.active_set = active_set
        self._values = array("Q", bytes(8 * active_set))

    def apply_operations(self, ops: list[Operation]) -> list[int]:
        values = self._values
        n = self.active_set
        results = []
        for op in ops:
            if op.key >= n or op.key < 0:
                raise KeyOutOfRange(f"key {op.key} outside active set of {n}")
            values[op.key] = op.value
            results.append(op.value)
        return results

    def get(self, key: int) -> int:
        if key >= self.active_set or key < 0:
            raise KeyOutOfRange(f"key {key} outside active set of {self.active_set}")
        return self._values[key]

    def snapshot(self) -> bytes:
        """Canonical byte image of the full table (backend independent)."""
        return self._values.tobytes()

    def state_hash(self) -> bytes:
        return hash_bytes(self.snapshot())

    def close(self) -> None:
        pass


class FileBackedStateStore(StateStore):
    """SQLite-backed table; every write is its own implicit transaction,
    so the execute stage pays the full round trip to storage per operation."""

    backend = "filebacked"

    def __init__(self, active_set: int, path: str | Path):
        self.active_set = active_set
        self.path = str(path)
        # constructed on the main thread, then owned exclusively by the
        # execute stage; sqlite's same-thread guard would reject the handoff
        self._con = sqlite3.connect(self.path, isolation_level=None,
                                    check_same_thread=False)
        cur = self._con.cursor()
        cur.execute("PRAGMA synchronous=OFF")
        cur.execute("CREATE TABLE IF NOT EXISTS kv (k INTEGER PRIMARY KEY, v INTEGER NOT NULL)")
        cur.execute("SELECT COUNT(*) FROM kv")
        if cur.fetchone()[0] != active_set:
            cur.execute("DELETE FROM kv")
            cur.execute("BEGIN")
            cur.executemany("INSERT INTO kv VALUES (?, 0)", ((k,) for k in range(active_set)))
            cur.execute("COMMIT")
        cur.execute("PRAGMA synchronous=FULL")
        self._cur = cur

    def apply_operations(self, ops: list[Operation]) -> list[int]:
        n = self.active_set
        cur = self._cur
        results = []
        for op in ops:
            if op.key >= n or op.key < 0:
                raise KeyOutOfRange(f"key {op.key} outside active set of {n}")
            # signed 64-bit storage; values arrive as unsigned wire integers
            v = op.value - (1 << 64) if op.value >= (1 << 63) else op.value
            cur.execute("UPDATE kv SET v=? WHERE k=?", (v, op.key))
            results.append(op.value)
        return results

    def get(self, key: int) -> int:
        if key >= self.active_set or key < 0:
            raise KeyOutOfRange(f"key {key} outside active set of {self.active_set}")
        self._cur.execute("SELECT v FROM kv WHERE k=?", (key,))
        v = self._cur.fetchone()[0]
        return v + (1 << 64) if v < 0 else v

    def snapshot(self) -> bytes:
        arr = array("Q", bytes(8 * self.active_set))
        for k, v in self._cur.execute("SELECT k, v FROM kv ORDER BY k"):
            arr[k] = v % (1 << 64)
        return arr.tobytes()

    def close(self) -> None:
        self._con.close()


def make_state_store(backend: str, active_set: int, path: str | Path | None = None) -> StateStore:
    if backend == "inmemory":
        return StateStore(active_set)
    if backend == "filebacked":
        if path is None:
            raise ValueError("filebacked store needs a path")
        return FileBackedStateStore(active_set, path)
    raise ValueError(f"unknown storage backend {backend!r}")


def prune_below(instances: dict[int, object], established_checkpoints: list[int],
                checkpoint_seq: int) -> dict[int, object]:
    """Release consensus metadata older than the checkpoint *before* the one
    just established.  Returns the pruned entries (so callers can recycle
    them).  Chain blocks are retained; only per-instance state is released.
    """
    older = [c for c in established_checkpoints if c < checkpoint_seq]
    if not older:
        return {}
    previous = max(older)
    pruned = {seq: inst for seq, inst in instances.items() if seq < previous}
    for seq in pruned:
        del instances[seq]
    return pruned
