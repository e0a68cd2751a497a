"""Post-run safety validation.

After every benchmark run the orchestrator requires that all non-faulty
replicas produced byte-identical chain dumps that validate, identical state
hashes, and - when a batch log was recorded - that replaying the committed
batches through a single-threaded reference executor reproduces exactly the
state every replica reached.  The reference executor is deliberately naive:
decode, walk batches in log order, poke values into a flat table.
"""

from __future__ import annotations

import struct
from array import array
from pathlib import Path

from .crypto import hash_bytes
from .ledger import parse_dump, validate_chain
from .messages import decode_batch

_LOG_HDR = struct.Struct(">QI")


class SafetyViolation(RuntimeError):
    """Replicas diverged: differing chains, states, or replay mismatch."""


def read_batch_log(path: str | Path):
    """Yields (first_seq, raw_batch_bytes) in recorded order."""
    data = Path(path).read_bytes()
    off = 0
    while off < len(data):
        if off + _LOG_HDR.size > len(data):
            raise SafetyViolation(f"truncated batch log {path}")
        seq, length = _LOG_HDR.unpack_from(data, off)
        off += _LOG_HDR.size
        raw = data[off : off + length]
        if len(raw) != length:
            raise SafetyViolation(f"truncated batch log {path}")
        off += length
        yield seq, raw


def replay_state_hash(log_path: str | Path, active_set: int) -> tuple[bytes, int]:
    """Reference execution: apply every logged batch in sequence order.

    Returns (state hash, number of requests replayed).  Verifies the log
    itself is gapless.
    """
    table = array("Q", bytes(8 * active_set))
    expected = 0
    replayed = 0
    for seq, raw in read_batch_log(log_path):
        if seq != expected:
            raise SafetyViolation(f"batch log gap: expected seq {expected}, got {seq}")
        batch = decode_batch(raw)
        if batch.first_seq != seq:
            raise SafetyViolation(f"batch log body seq {batch.first_seq} != header {seq}")
        for req in batch.requests:
            for op in req.operations:
                if op.key >= active_set:
                    raise SafetyViolation(f"replayed key {op.key} outside active set")
                table[op.key] = op.value
            replayed += 1
        expected = batch.last_seq + 1
    return hash_bytes(table.tobytes()), replayed


def check_run_safety(run_dir: str | Path, n: int, failed: set[int],
                     active_set: int) -> dict:
    """Cross-replica agreement checks for one finished run.

    Raises SafetyViolation on any divergence; returns summary facts
    (chain height, replayed request count) on success.
    """
    run_dir = Path(run_dir)
    healthy = [r for r in range(n) if r not in failed]
    dumps = {}
    hashes = {}
    for rid in healthy:
        chain_path = run_dir / f"chain_{rid}.dump"
        state_path = run_dir / f"state_{rid}.sha"
        if not chain_path.exists() or not state_path.exists():
            raise SafetyViolation(f"replica {rid} left no artifacts in {run_dir}")
        dumps[rid] = chain_path.read_text()
        hashes[rid] = state_path.read_text().strip()

    reference_id = healthy[0]
    for rid in healthy[1:]:
        if dumps[rid] != dumps[reference_id]:
            raise SafetyViolation(
                f"chain dumps differ between replicas {reference_id} and {rid}")
        if hashes[rid] != hashes[reference_id]:
            raise SafetyViolation(
                f"state hashes differ between replicas {reference_id} and {rid}")

    blocks = parse_dump(dumps[reference_id])
    if not validate_chain(blocks):
        raise SafetyViolation("chain dump fails link validation")

    facts = {"chain_height": len(blocks), "replayed_requests": 0}
    log_path = run_dir / f"batches_{0}.log"
    if log_path.exists():
        replay_hash, replayed = replay_state_hash(log_path, active_set)
        if replay_hash.hex() != hashes[reference_id]:
            raise SafetyViolation(
                "reference replay state differs from replica state "
                f"({replay_hash.hex()[:16]} vs {hashes[reference_id][:16]})")
        facts["replayed_requests"] = replayed
    return facts
