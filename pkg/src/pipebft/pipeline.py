"""Replica runtime plumbing: work queues, sequence assignment, the execution
queue array that turns out-of-order commit completion into strictly ordered
execution, buffer pools, and per-stage utilization clocks.

The execution queue array keeps QC logical queues (QC = 2 x clients x
outstanding window).  A directive for a batch starting at sequence s goes to
queue s mod QC; the executor, having finished everything below s, looks only
at queue s mod QC, so finding the next in-order batch is O(1).  Queues are
materialized lazily, so memory stays proportional to what is actually pending.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field


class UnknownRoute(LookupError):
    pass


class DuplicateDirective(RuntimeError):
    """The same batch was scheduled twice: quorum tracking is broken."""


class SequenceRestart(AssertionError):
    pass


@dataclass(slots=True)
class ExecuteDirective:
    """Order-to-execute for one committed (or speculatively accepted) batch."""

    first_seq: int
    last_seq: int
    digest: bytes
    view: int
    batch: object = field(default=None, compare=False)


class WorkQueue:
    """Multi-producer multi-consumer FIFO.

    Consumers drain in chunks to amortize wakeup cost; ``lock-free`` is a
    performance aspiration of the design this follows, linearizability is
    what the implementation guarantees.
    """

    def __init__(self):
        self._q: deque = deque()
        self._cv = threading.Condition()

    def __len__(self) -> int:
        return len(self._q)

    def put(self, item) -> None:
        with self._cv:
            self._q.append(item)
            self._cv.notify()

    def put_many(self, items) -> None:
        with self._cv:
            self._q.extend(items)
            self._cv.notify()

    def get(self, timeout: float | None = None):
        """One item, or None on timeout."""
        with self._cv:
            if not self._q:
                self._cv.wait(timeout)
                if not self._q:
                    return None
            return self._q.popleft()

    def drain(self, max_items: int = 1 << 30, timeout: float | None = None) -> list:
        """Everything currently queued (up to ``max_items``), waiting up to
        ``timeout`` for the first item."""
        with self._cv:
            if not self._q:
                self._cv.wait(timeout)
            out = []
            q = self._q
            while q and len(out) < max_items:
                out.append(q.popleft())
            if q:
                self._cv.notify()
            return out

    def collect(self, max_items: int, flush_timeout: float, idle_timeout: float) -> list:
        """Batch-assembly pop: waits up to ``idle_timeout`` for a first item,
        then keeps gathering until ``max_items`` or ``flush_timeout`` after
        the first item arrived."""
        deadline = None
        out: list = []
        with self._cv:
            while True:
                q = self._q
                while q and len(out) < max_items:
                    out.append(q.popleft())
                if len(out) >= max_items:
                    if q:
                        self._cv.notify()
                    return out
                now = time.monotonic()
                if out:
                    if deadline is None:
                        deadline = now + flush_timeout
                    remaining = deadline - now
                    if remaining <= 0:
                        return out
                    self._cv.wait(remaining)
                else:
                    if not self._cv.wait(idle_timeout):
                        return out


class SequenceAssigner:
    """Gapless, monotonically increasing global sequence numbers.

    ``claim(k)`` hands out a contiguous run of k numbers; racing claimers get
    disjoint contiguous ranges.  The counter can never restart.
    """

    def __init__(self, start: int = 0):
        self._next = start
        self._start = start
        self._lock = threading.Lock()

    def claim(self, count: int = 1) -> int:
        with self._lock:
            if self._next < self._start:
                raise SequenceRestart("sequence counter moved backwards")
            first = self._next
            self._next += count
            return first

    def assign_sequence(self) -> int:
        return self.claim(1)

    @property
    def next_seq(self) -> int:
        return self._next


class ExecutionQueueArray:
    """QC logical queues; directive for sequence s lives in queue s mod QC."""

    def __init__(self, qc: int):
        if qc < 1:
            raise ValueError("QC must be >= 1")
        self.qc = qc
        self._slots: dict[int, list[ExecuteDirective]] = {}
        self._cv = threading.Condition()
        self._seen: set[int] = set()

    def schedule(self, directive: ExecuteDirective) -> None:
        idx = directive.first_seq % self.qc
        with self._cv:
            if directive.first_seq in self._seen:
                raise DuplicateDirective(f"batch at seq {directive.first_seq} scheduled twice")
            self._seen.add(directive.first_seq)
            self._slots.setdefault(idx, []).append(directive)
            self._cv.notify_all()

    def take_next(self, next_seq: int, timeout: float | None = None) -> ExecuteDirective | None:
        """The directive whose batch starts exactly at ``next_seq``, or None.

        Only queue ``next_seq mod QC`` is inspected; anything else pending
        stays put until its turn.
        """
        idx = next_seq % self.qc
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while True:
                slot = self._slots.get(idx)
                if slot:
                    for i, d in enumerate(slot):
                        if d.first_seq == next_seq:
                            slot.pop(i)
                            if not slot:
                                del self._slots[idx]
                            self._seen.discard(next_seq)
                            return d
                if deadline is None:
                    self._cv.wait()
                else:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        return None
                    self._cv.wait(remaining)

    def pending(self) -> int:
        with self._cv:
            return sum(len(s) for s in self._slots.values())


class BufferPool:
    """Pre-allocated free list of reusable objects.

    Exhaustion falls back to fresh allocation (counted); release beyond
    capacity discards the object.  A size of zero degenerates to plain
    allocation while keeping the call sites unchanged.
    """

    def __init__(self, factory, reset=None, size: int = 0, prefill: bool = True):
        self._factory = factory
        self._reset = reset
        self._size = size
        self._free: list = [factory() for _ in range(size)] if prefill else []
        self._lock = threading.Lock()
        self.acquires = 0
        self.releases = 0
        self.fresh_allocs = 0
        self.high_water = 0

    def acquire(self):
        with self._lock:
            self.acquires += 1
            outstanding = self.acquires - self.releases
            if outstanding > self.high_water:
                self.high_water = outstanding
            if self._free:
                return self._free.pop()
            self.fresh_allocs += 1
        return self._factory()

    def release(self, obj) -> None:
        if self._reset is not None:
            self._reset(obj)
        with self._lock:
            self.releases += 1
            if len(self._free) < self._size:
                self._free.append(obj)

    @property
    def free_count(self) -> int:
        return len(self._free)

    def stats(self) -> dict[str, int]:
        return {
            "acquires": self.acquires,
            "releases": self.releases,
            "fresh_allocs": self.fresh_allocs,
            "high_water": self.high_water,
        }


class CheckpointCoordinator:
    """Checkpoint cadence and stability tracking.

    ``note_executed`` fires whenever execution progress crosses a multiple of
    delta (exact alignment is the common case; odd batch sizes still
    checkpoint at the crossed boundary).  Stability needs ``quorum`` identical
    (seq, chain digest) votes from distinct replicas, own vote included; each
    stable checkpoint triggers pruning below the *previous* one.
    """

    def __init__(self, delta: int, quorum: int, emit_checkpoint, on_stable):
        if delta < 1:
            raise ValueError("delta must be >= 1")
        self.delta = delta
        self.quorum = quorum
        self.emit_checkpoint = emit_checkpoint    # (checkpoint_seq) -> None
        self.on_stable = on_stable                # (stable_seq, established snapshot) -> None
        self._last_mark = 0
        self._votes: dict[tuple[int, bytes], set[int]] = {}
        self._stable: set[int] = set()
        self.established: list[int] = []
        self._lock = threading.Lock()

    def note_executed(self, executed_through: int) -> None:
        """Called by the executor with its next expected sequence number."""
        boundary = (executed_through // self.delta) * self.delta
        if boundary > self._last_mark:
            self._last_mark = boundary
            self.emit_checkpoint(boundary)

    def on_checkpoint(self, seq: int, chain_digest: bytes, sender: int) -> None:
        with self._lock:
            if seq in self._stable:
                return
            votes = self._votes.setdefault((seq, chain_digest), set())
            if sender in votes:
                return
            votes.add(sender)
            if len(votes) < self.quorum:
                return
            self._stable.add(seq)
            self.established.append(seq)
            established = list(self.established)
            stale = [k for k in self._votes if k[0] <= seq]
            for k in stale:
                del self._votes[k]
        self.on_stable(seq, established)


class StageClock:
    """Busy-time accumulator for one pipeline thread."""

    def __init__(self, role: str):
        self.role = role
        self.busy_ns = 0
        self.started_ns = time.monotonic_ns()

    def begin(self) -> int:
        return time.monotonic_ns()

    def end(self, t0: int) -> None:
        self.busy_ns += time.monotonic_ns() - t0

    def utilization(self) -> float:
        wall = time.monotonic_ns() - self.started_ns
        if wall <= 0:
            return 0.0
        return min(1.0, self.busy_ns / wall)


class UtilizationRegistry:
    """Per-role busy fractions for the whole replica."""

    def __init__(self):
        self._clocks: list[StageClock] = []
        self._lock = threading.Lock()

    def clock(self, role: str) -> StageClock:
        c = StageClock(role)
        with self._lock:
            self._clocks.append(c)
        return c

    def thread_utilization(self) -> dict[str, float]:
        with self._lock:
            return {c.role: round(c.utilization(), 6) for c in self._clocks}
