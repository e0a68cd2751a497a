"""Three-phase consensus state machine (normal case, fixed view).

The engine is a synchronous state machine: handlers take decoded messages and
emit outbound traffic / execute directives through injected callbacks.  All
instance mutation is expected to happen on the single worker thread, except
that batch threads insert fully formed instances for fresh sequence ranges
they own, and the executor marks instances executed via a worker notice.

View change is out of scope; equivocation by the primary is detected, poisons
the instance, and is counted.
"""

from __future__ import annotations

from .config import ClusterConfig, SchemeConfig
from .crypto import KeyStore, MissingKey
from .ledger import prune_below
from .messages import (
    ClientRequest,
    ClientResponse,
    Commit,
    Prepare,
    PrePrepare,
    RequestBatch,
    client_response_signed_portion,
    digest_of_batch,
    encode_batch,
    prepare_signed_portion,
    preprepare_signed_portion,
    request_signed_portion,
)
from .pipeline import ExecuteDirective, SequenceAssigner

PHASE_NONE = 0
PHASE_PRE_PREPARED = 1
PHASE_PREPARED = 2
PHASE_COMMITTED = 3
PHASE_EXECUTED = 4


class ConsensusInstance:
    """Quorum tracking for one batch sequence number."""

    __slots__ = (
        "view", "seq", "last_seq", "digest", "phase", "batch",
        "prepare_senders", "commit_senders",
        "preprepared", "commit_sent", "directive_emitted", "poisoned",
        "result_digests",
    )

    def __init__(self, seq: int):
        self.view = 0
        self.seq = seq
        self.last_seq = seq
        self.digest = b""
        self.phase = PHASE_NONE
        self.batch: RequestBatch | None = None
        self.prepare_senders: dict[bytes, set[int]] = {}
        self.commit_senders: dict[bytes, set[int]] = {}
        self.preprepared = False
        self.commit_sent = False
        self.directive_emitted = False
        self.poisoned = False
        self.result_digests: dict[tuple[int, int], bytes] = {}

    def reset(self):
        self.__init__(0)


def _advance(inst: ConsensusInstance, phase: int) -> None:
    if phase < inst.phase:
        raise AssertionError(f"phase moved backwards at seq {inst.seq}")
    inst.phase = phase


class EngineBase:
    """Shared machinery: batch formation at the primary, instance store,
    checkpoint pruning, counters."""

    def __init__(self, cluster: ClusterConfig, keys: KeyStore, scheme: SchemeConfig,
                 qc: int, broadcast, send_client, schedule, counters: dict | None = None,
                 instance_pool=None):
        self.cluster = cluster
        self.keys = keys
        self.scheme = scheme
        self.qc = qc
        self.broadcast = broadcast            # (msg) -> None, to all other replicas
        self.send_client = send_client        # (client_proc_id, msg) -> None
        self.schedule = schedule              # (ExecuteDirective) -> None
        self.counters = counters if counters is not None else {}
        self.instances: dict[int, ConsensusInstance] = {}
        self.assigner = SequenceAssigner()
        self.exec_progress = 0                # mirror of executor's next sequence
        # replicas lag each other by the pipeline depth, so the drop threshold
        # for far-future messages sits beyond the nominal window
        self.window_cap = 2 * qc
        self._instance_pool = instance_pool
        self._replica_ids = list(cluster.replica_ids)

    # -- helpers -------------------------------------------------------------

    def count(self, key: str, by: int = 1) -> None:
        self.counters[key] = self.counters.get(key, 0) + by

    def _new_instance(self, seq: int) -> ConsensusInstance:
        if self._instance_pool is not None:
            inst = self._instance_pool.acquire()
            inst.seq = inst.last_seq = seq
            return inst
        return ConsensusInstance(seq)

    def _instance(self, seq: int) -> ConsensusInstance:
        inst = self.instances.get(seq)
        if inst is None:
            inst = self._new_instance(seq)
            self.instances[seq] = inst
        return inst

    def _sign_replica(self, signed: bytes):
        return self.keys.sign(self.cluster.my_id, self._replica_ids, signed,
                              self.scheme.replica_scheme)

    def verify_client_request(self, req: ClientRequest) -> bool:
        ident = self.cluster.key_identity_of_client(req.client_id)
        try:
            return self.keys.verify(ident, self.cluster.my_id,
                                    request_signed_portion(req), req.signature)
        except MissingKey:
            return False

    # -- primary batch formation ----------------------------------------------

    def primary_on_request_batch(self, candidates: list[ClientRequest]) -> PrePrepare | None:
        """Verify client signatures, claim a fresh contiguous sequence range,
        and broadcast the batch proposal.  Called from a batch thread; the
        instance it creates is for a range no other thread owns."""
        accepted = []
        for req in candidates:
            if self.verify_client_request(req):
                accepted.append(req)
            else:
                self.count("bad_client_sig")
        if not accepted:
            return None
        first = self.assigner.claim(len(accepted))
        last = first + len(accepted) - 1
        if first - self.exec_progress >= self.qc:
            # the queue array tolerates slot collisions (exact-sequence
            # matching per slot), so an overshoot is a throttling miss,
            # not a correctness problem
            self.count("qc_window_exceeded")
        batch = RequestBatch(first, last, accepted)
        encode_batch(batch)
        digest = digest_of_batch(batch)
        pp = PrePrepare(self.cluster.view, first, digest, batch, None)
        pp.signature = self._sign_replica(preprepare_signed_portion(pp))

        inst = self._new_instance(first)
        inst.view = pp.view
        inst.last_seq = last
        inst.digest = digest
        inst.batch = batch
        inst.preprepared = True
        inst.phase = PHASE_PRE_PREPARED
        self.instances[first] = inst

        self.broadcast(pp)
        self.count("sent_preprepare")
        return pp

    # -- execution side --------------------------------------------------------

    def make_client_responses(self, batch: RequestBatch,
                              results_per_request: list[list[int]]):
        """Per-request responses, signed under the replica scheme.  Runs on
        the execute thread."""
        my = self.cluster.my_id
        out = []
        for req, results in zip(batch.requests, results_per_request):
            resp = ClientResponse(req.client_id, req.request_seq, my, results, None)
            signed = client_response_signed_portion(resp)
            proc = self.cluster.key_identity_of_client(req.client_id)
            resp.signature = self.keys.sign(my, proc, signed, self._response_scheme())
            out.append((proc, resp))
        return out

    def _response_scheme(self) -> int:
        return self.scheme.replica_scheme

    def handle_executed(self, seq: int) -> None:
        """Worker-thread notice that the executor finished batch ``seq``."""
        inst = self.instances.get(seq)
        if inst is not None:
            _advance(inst, PHASE_EXECUTED)

    def prune_below_checkpoint(self, established: list[int], stable_seq: int) -> int:
        pruned = prune_below(self.instances, established, stable_seq)
        if self._instance_pool is not None:
            for inst in pruned.values():
                self._instance_pool.release(inst)
        return len(pruned)


class PbftEngine(EngineBase):
    """Pre-prepare / prepare / commit with 2f and 2f+1 quorums."""

    def primary_on_request_batch(self, candidates):
        pp = super().primary_on_request_batch(candidates)
        if pp is not None and self.cluster.prepare_quorum() == 0:
            # f=0: the prepare quorum is empty, nothing will ever trigger it
            self._check_prepared(self.instances[pp.seq])
        return pp

    def on_preprepare(self, pp: PrePrepare) -> None:
        cluster = self.cluster
        if cluster.is_primary():
            return  # the primary formed this batch itself
        if not self.keys.verify(cluster.primary, cluster.my_id, pp.signed_portion, pp.signature):
            self.count("bad_primary_sig")
            return
        if digest_of_batch(pp.batch.raw) != pp.digest:
            self.count("digest_mismatch")
            return
        if pp.seq - self.exec_progress >= self.window_cap:
            self.count("dropped_overflow")
            return
        inst = self._instance(pp.seq)
        if inst.poisoned:
            return
        if inst.preprepared:
            if inst.digest != pp.digest:
                inst.poisoned = True
                self.count("conflicting_preprepare")
            return
        inst.view = pp.view
        inst.digest = pp.digest
        inst.batch = pp.batch
        inst.last_seq = pp.batch.last_seq
        inst.preprepared = True
        if inst.phase < PHASE_PRE_PREPARED:
            _advance(inst, PHASE_PRE_PREPARED)

        prep = Prepare(pp.view, pp.seq, pp.digest, cluster.my_id, None)
        prep.signature = self._sign_replica(prepare_signed_portion(prep))
        inst.prepare_senders.setdefault(pp.digest, set()).add(cluster.my_id)
        self.broadcast(prep)
        self.count("sent_prepare")
        self._check_prepared(inst)

    def on_prepare(self, p: Prepare) -> None:
        if p.sender_id == self.cluster.my_id:
            return
        if p.sender_id == self.cluster.primary:
            self.count("prepare_from_primary")
            return
        if not self.keys.verify(p.sender_id, self.cluster.my_id, p.signed_portion, p.signature):
            self.count("bad_sig_prepare")
            return
        if p.seq - self.exec_progress >= self.window_cap:
            self.count("dropped_overflow")
            return
        inst = self._instance(p.seq)
        if inst.poisoned:
            return
        senders = inst.prepare_senders.setdefault(p.digest, set())
        if p.sender_id in senders:
            return
        senders.add(p.sender_id)
        self._check_prepared(inst)

    def on_commit(self, c: Commit) -> None:
        if c.sender_id == self.cluster.my_id:
            return
        if not self.keys.verify(c.sender_id, self.cluster.my_id, c.signed_portion, c.signature):
            self.count("bad_sig_commit")
            return
        if c.seq - self.exec_progress >= self.window_cap:
            self.count("dropped_overflow")
            return
        inst = self._instance(c.seq)
        if inst.poisoned:
            return
        senders = inst.commit_senders.setdefault(c.digest, set())
        if c.sender_id in senders:
            return
        senders.add(c.sender_id)
        self._check_committed(inst)

    def _check_prepared(self, inst: ConsensusInstance) -> None:
        if not inst.preprepared or inst.commit_sent:
            return
        senders = inst.prepare_senders.get(inst.digest, ())
        if len(senders) < self.cluster.prepare_quorum():
            return
        _advance(inst, PHASE_PREPARED)
        inst.commit_sent = True
        commit = Commit(inst.view, inst.seq, inst.digest, self.cluster.my_id, None)
        commit.signature = self._sign_replica(prepare_signed_portion(commit))
        inst.commit_senders.setdefault(inst.digest, set()).add(self.cluster.my_id)
        self.broadcast(commit)
        self.count("sent_commit")
        self._check_committed(inst)

    def _check_committed(self, inst: ConsensusInstance) -> None:
        if not inst.preprepared or inst.directive_emitted or not inst.commit_sent:
            return
        senders = inst.commit_senders.get(inst.digest, ())
        if len(senders) < self.cluster.commit_quorum():
            return
        _advance(inst, PHASE_COMMITTED)
        inst.directive_emitted = True
        self.schedule(ExecuteDirective(inst.seq, inst.last_seq, inst.digest,
                                       inst.view, inst.batch))
