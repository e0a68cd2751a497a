"""Queue, sequence-assignment, execution-queue-array, buffer-pool and
checkpoint-cadence behavior, including the adversarial-order and
priority-queue differential oracles."""

from __future__ import annotations

import heapq
import random
import threading
import time

import pytest

from pipebft.pipeline import (
    BufferPool,
    CheckpointCoordinator,
    DuplicateDirective,
    ExecuteDirective,
    ExecutionQueueArray,
    SequenceAssigner,
    StageClock,
    WorkQueue,
)


def make_directives(batch_sizes: list[int]) -> list[ExecuteDirective]:
    out = []
    seq = 0
    for i, size in enumerate(batch_sizes):
        out.append(ExecuteDirective(seq, seq + size - 1, bytes([i % 256]) * 32, 0))
        seq += size
    return out


def reference_executor(directives: list[ExecuteDirective]) -> list[int]:
    """Priority-queue oracle: independent of the modular queue array."""
    heap = [(d.first_seq, d) for d in directives]
    heapq.heapify(heap)
    order = []
    next_seq = 0
    while heap:
        first_seq, d = heapq.heappop(heap)
        assert first_seq == next_seq, "oracle expects a gapless directive set"
        order.append(first_seq)
        next_seq = d.last_seq + 1
    return order


def drain_array(array: ExecutionQueueArray, count: int) -> list[int]:
    order = []
    next_seq = 0
    for _ in range(count):
        d = array.take_next(next_seq, timeout=1.0)
        assert d is not None
        order.append(d.first_seq)
        next_seq = d.last_seq + 1
    return order


# -- work queue ----------------------------------------------------------------

def test_workqueue_fifo_and_drain():
    q = WorkQueue()
    for i in range(10):
        q.put(i)
    assert q.drain() == list(range(10))
    assert q.get(timeout=0.01) is None


def test_workqueue_no_loss_no_duplication_under_concurrency():
    q = WorkQueue()
    n_producers, per = 4, 2500
    seen = []
    done = threading.Event()

    def produce(base):
        for i in range(per):
            q.put(base + i)

    def consume():
        while not (done.is_set() and len(q) == 0):
            seen.extend(q.drain(timeout=0.01))

    consumers = [threading.Thread(target=consume) for _ in range(3)]
    for c in consumers:
        c.start()
    producers = [threading.Thread(target=produce, args=(k * per,)) for k in range(n_producers)]
    for p in producers:
        p.start()
    for p in producers:
        p.join()
    done.set()
    for c in consumers:
        c.join()
    assert sorted(seen) == list(range(n_producers * per))


def test_workqueue_collect_fills_or_flushes():
    q = WorkQueue()
    for i in range(7):
        q.put(i)
    assert q.collect(5, flush_timeout=0.5, idle_timeout=0.1) == [0, 1, 2, 3, 4]
    t0 = time.monotonic()
    got = q.collect(5, flush_timeout=0.05, idle_timeout=0.1)
    assert got == [5, 6]
    assert time.monotonic() - t0 >= 0.04  # waited for the flush window


# -- sequence assigner -------------------------------------------------------------

def test_assigner_first_two():
    a = SequenceAssigner()
    assert a.assign_sequence() == 0
    assert a.assign_sequence() == 1


def test_assigner_gapless_under_concurrent_claims():
    a = SequenceAssigner()
    claims = []
    lock = threading.Lock()

    def worker():
        local = []
        for _ in range(500):
            size = random.randrange(1, 5)
            first = a.claim(size)
            local.append((first, size))
        with lock:
            claims.extend(local)

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    flat = sorted(s for first, size in claims for s in range(first, first + size))
    assert flat == list(range(len(flat)))  # permutation-free gapless range


# -- execution queue array ----------------------------------------------------------

def test_directives_execute_in_sequence_order_despite_arrival():
    array = ExecutionQueueArray(qc=12)
    d1, d2 = make_directives([1, 1])
    array.schedule(d2)
    array.schedule(d1)
    assert drain_array(array, 2) == [0, 1]


def test_qc_formula_slot_mapping():
    # two clients, three outstanding each: QC = 2 * 2 * 3 = 12; seq 13 -> slot 1
    qc = 2 * 2 * 3
    array = ExecutionQueueArray(qc)
    d = ExecuteDirective(13, 13, bytes(32), 0)
    array.schedule(d)
    assert 13 % qc == 1
    assert array._slots[1][0] is d


def test_missing_seq_blocks_everything_after():
    array = ExecutionQueueArray(qc=64)
    directives = make_directives([5] * 10)
    for d in directives[1:]:
        array.schedule(d)
    assert array.take_next(0, timeout=0.15) is None
    assert array.pending() == 9
    array.schedule(directives[0])
    assert drain_array(array, 10) == [d.first_seq for d in directives]


def test_duplicate_directive_raises():
    array = ExecutionQueueArray(qc=8)
    d = ExecuteDirective(0, 0, bytes(32), 0)
    array.schedule(d)
    with pytest.raises(DuplicateDirective):
        array.schedule(ExecuteDirective(0, 0, bytes(32), 0))


@pytest.mark.parametrize("seed", [1, 2, 3, 4, 5])
def test_adversarial_shuffle_matches_priority_queue_oracle(seed):
    rng = random.Random(seed)
    sizes = [rng.randrange(1, 7) for _ in range(200)]
    directives = make_directives(sizes)
    expected = reference_executor(list(directives))

    shuffled = list(directives)
    rng.shuffle(shuffled)
    array = ExecutionQueueArray(qc=4096)
    order = []
    next_seq = 0
    pending = list(shuffled)
    # interleave scheduling and draining to mimic commit-completion races
    while pending or True:
        for _ in range(rng.randrange(0, 4)):
            if pending:
                array.schedule(pending.pop())
        d = array.take_next(next_seq, timeout=0)
        if d is None:
            if not pending and array.pending() == 0:
                break
            if not pending:
                d = array.take_next(next_seq, timeout=1.0)
            else:
                continue
        order.append(d.first_seq)
        next_seq = d.last_seq + 1
    assert order == expected


def test_concurrent_schedulers_single_drainer():
    directives = make_directives([3] * 300)
    array = ExecutionQueueArray(qc=8192)
    chunks = [directives[i::4] for i in range(4)]

    def scheduler(chunk):
        rng = random.Random(len(chunk))
        items = list(chunk)
        rng.shuffle(items)
        for d in items:
            array.schedule(d)
            if rng.random() < 0.1:
                time.sleep(0)

    threads = [threading.Thread(target=scheduler, args=(c,)) for c in chunks]
    for t in threads:
        t.start()
    order = drain_array(array, len(directives))
    for t in threads:
        t.join()
    assert order == [d.first_seq for d in directives]


# -- buffer pool ---------------------------------------------------------------------

def test_pool_reuses_objects():
    pool = BufferPool(lambda: bytearray(8), None, size=2)
    a = pool.acquire()
    pool.release(a)
    b = pool.acquire()
    assert b is a
    assert pool.stats()["fresh_allocs"] == 0


def test_pool_exhaustion_falls_back_to_allocation():
    pool = BufferPool(lambda: object(), None, size=1)
    a, b = pool.acquire(), pool.acquire()
    assert a is not b
    assert pool.stats()["fresh_allocs"] == 1
    pool.release(a)
    pool.release(b)  # beyond capacity: discarded
    assert pool.free_count == 1


def test_pool_size_zero_always_allocates():
    pool = BufferPool(lambda: object(), None, size=0)
    a = pool.acquire()
    pool.release(a)
    assert pool.acquire() is not a
    assert pool.stats()["fresh_allocs"] == 2


def test_pool_balanced_under_concurrency():
    pool = BufferPool(lambda: bytearray(4), None, size=16)
    cycles = 3000

    def churn():
        for _ in range(cycles):
            obj = pool.acquire()
            pool.release(obj)

    threads = [threading.Thread(target=churn) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    stats = pool.stats()
    assert stats["acquires"] == stats["releases"] == 4 * cycles
    assert stats["high_water"] <= 4


def test_pool_reset_zeroes_reused_objects():
    class Obj:
        def __init__(self):
            self.v = 0

        def reset(self):
            self.v = 0

    pool = BufferPool(Obj, Obj.reset, size=1)
    a = pool.acquire()
    a.v = 99
    pool.release(a)
    assert pool.acquire().v == 0


# -- checkpoint cadence -----------------------------------------------------------------

def collect_coordinator(delta=100, quorum=3):
    emitted, stables = [], []
    coord = CheckpointCoordinator(delta, quorum,
                                  emit_checkpoint=emitted.append,
                                  on_stable=lambda seq, est: stables.append((seq, est)))
    return coord, emitted, stables


def test_checkpoint_fires_on_delta_multiples():
    coord, emitted, _ = collect_coordinator()
    coord.note_executed(100)
    assert emitted == [100]
    coord.note_executed(150)
    assert emitted == [100]
    coord.note_executed(200)
    assert emitted == [100, 200]


def test_checkpoint_fires_when_boundary_crossed_midbatch():
    coord, emitted, _ = collect_coordinator()
    coord.note_executed(99)
    assert emitted == []
    coord.note_executed(103)  # batch straddled the boundary
    assert emitted == [100]


def test_checkpoint_stability_needs_quorum_of_distinct_senders():
    coord, _, stables = collect_coordinator(quorum=3)
    d = bytes(32)
    coord.on_checkpoint(100, d, 0)
    coord.on_checkpoint(100, d, 0)  # duplicate sender ignored
    coord.on_checkpoint(100, d, 1)
    assert stables == []
    coord.on_checkpoint(100, d, 2)
    assert stables == [(100, [100])]
    # mismatched digests never pool together
    coord.on_checkpoint(200, b"\x01" * 32, 0)
    coord.on_checkpoint(200, bytes(32), 1)
    coord.on_checkpoint(200, bytes(32), 2)
    assert len(stables) == 1


def test_stage_clock_fraction_bounds():
    clock = StageClock("x")
    t0 = clock.begin()
    time.sleep(0.01)
    clock.end(t0)
    u = clock.utilization()
    assert 0.0 <= u <= 1.0
