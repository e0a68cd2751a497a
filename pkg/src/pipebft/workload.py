"""Client workload: Zipfian key selection over the active set, write-only
multi-operation transactions with configurable payload filler, and the
response-collection rules that decide when a request is complete.

Key selection samples the exact rank-frequency law p(rank) ~ 1/rank^theta by
inverse CDF over precomputed cumulative weights; theta = 0 degenerates to a
uniform draw.  Streams are deterministic per (seed, client id).
"""

from __future__ import annotations

import random
from array import array
from bisect import bisect_right
from itertools import accumulate

from .config import WorkloadConfig
from .messages import ClientRequest, Operation, OP_WRITE, finish_request, results_digest

_CUM_CACHE: dict[tuple[int, float], tuple[array, float]] = {}


class ZipfianKeys:
    """Zipfian-distributed ranks over [0, n); rank 0 is the hottest key."""

    def __init__(self, n: int, theta: float, rng: random.Random):
        if not 0 <= theta < 1:
            raise ValueError("theta must be in [0, 1)")
        self.n = n
        self.theta = theta
        self.rng = rng
        if theta > 0:
            cached = _CUM_CACHE.get((n, theta))
            if cached is None:
                weights = (1.0 / (i + 1) ** theta for i in range(n))
                cum = array("d", accumulate(weights))
                cached = (cum, cum[-1])
                _CUM_CACHE[(n, theta)] = cached
            self._cum, self._total = cached

    def probability(self, rank: int) -> float:
        """Exact model probability of drawing ``rank`` (the test oracle)."""
        if self.theta == 0:
            return 1.0 / self.n
        return (1.0 / (rank + 1) ** self.theta) / self._total

    def next(self) -> int:
        if self.theta == 0:
            return self.rng.randrange(self.n)
        u = self.rng.random() * self._total
        return bisect_right(self._cum, u)


class RequestFactory:
    """Builds signed client requests for one logical client."""

    def __init__(self, cfg: WorkloadConfig, client_id: int, seed: int, sign_fn=None):
        self.cfg = cfg
        self.client_id = client_id
        self.rng = random.Random((seed << 32) ^ client_id)
        self.keys = ZipfianKeys(cfg.active_set, cfg.zipfian_skew, self.rng)
        self.sign_fn = sign_fn or (lambda data: None)
        self.request_seq = 0
        self._payload = bytes(cfg.payload_bytes)

    def next_request(self) -> ClientRequest:
        cfg = self.cfg
        rng = self.rng
        keys = self.keys
        ops = [Operation(OP_WRITE, keys.next(), rng.getrandbits(63))
               for _ in range(cfg.ops_per_txn)]
        req = ClientRequest(self.client_id, self.request_seq, ops, self._payload, None)
        self.request_seq += 1
        return finish_request(req, self.sign_fn)


class PbftResponseTracker:
    """f+1 matching results from distinct replicas complete a request.

    The tracker keeps absorbing straggler responses after completion so a
    contradictory quorum (two different result sets each with f+1 distinct
    replicas) is detected even when it forms late; that is a safety violation
    and aborts the run.
    """

    __slots__ = ("client_id", "request_seq", "submit_ns", "deadline",
                 "by_digest", "responders", "complete")

    def __init__(self, client_id: int, request_seq: int, submit_ns: int, deadline: float):
        self.client_id = client_id
        self.request_seq = request_seq
        self.submit_ns = submit_ns
        self.deadline = deadline
        self.by_digest: dict[bytes, set[int]] = {}
        self.responders: set[int] = set()
        self.complete = False

    def on_response(self, replica_id: int, results: list[int], quorum: int) -> str | None:
        """Returns "ok" exactly once at completion, "safety_violation" if two
        different result sets both reach quorum, else None."""
        digest = results_digest(results)
        self.responders.add(replica_id)
        group = self.by_digest.setdefault(digest, set())
        group.add(replica_id)
        if len(group) < quorum:
            return None
        if any(other != digest and len(members) >= quorum
               for other, members in self.by_digest.items()):
            return "safety_violation"
        if not self.complete:
            self.complete = True
            return "ok"
        return None

    def heard_all(self, n: int) -> bool:
        return len(self.responders) >= n

    def mismatched(self) -> bool:
        return len(self.by_digest) > 1
