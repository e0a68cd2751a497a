"""Single-phase speculative consensus.

Replicas execute a batch as soon as the primary's proposal validates (still
in strict sequence order, enforced by the execution queue array) and respond
straight to clients with signed execution evidence.  Clients need matching
responses from all n replicas before the timeout; with 2f+1 matching they
fall back to broadcasting a commit certificate and waiting for 2f+1 acks.

Responses must be verifiable by third parties (replicas check each other's
response signatures inside certificates), so they are never MAC-signed.
Mis-speculation is impossible here without a byzantine primary, which is out
of scope; divergence is nevertheless checked and halts the replica loudly.
"""

from __future__ import annotations

import time

from .config import SCHEME_MAC
from .crypto import MissingKey
from .messages import (
    CertAck,
    CommitCertificate,
    PrePrepare,
    SpecResponse,
    cert_ack_signed_portion,
    digest_of_batch,
    results_digest,
    spec_response_signed_portion,
)
from .pbft import EngineBase, PHASE_EXECUTED, PHASE_PRE_PREPARED, _advance
from .pipeline import ExecuteDirective

FAST_COMPLETE = "fast_complete"
CERT_COMMITTED = "cert_committed"
FAILED = "failed"


class DivergenceDetected(RuntimeError):
    """A certificate proves another execution outcome than ours: halt."""


class InvalidCertificate(ValueError):
    pass


class ZyzzyvaEngine(EngineBase):
    """Replica-side speculative path: execute on proposal, ack certificates."""

    def _response_scheme(self) -> int:
        return self.scheme.spec_response_scheme

    def on_preprepare(self, pp: PrePrepare) -> None:
        cluster = self.cluster
        if cluster.is_primary():
            return
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
        _advance(inst, PHASE_PRE_PREPARED)
        inst.directive_emitted = True
        self.schedule(ExecuteDirective(pp.seq, inst.last_seq, pp.digest, pp.view, pp.batch))

    def primary_on_request_batch(self, candidates):
        pp = super().primary_on_request_batch(candidates)
        if pp is not None:
            # the primary executes speculatively too
            inst = self.instances[pp.seq]
            inst.directive_emitted = True
            self.schedule(ExecuteDirective(pp.seq, inst.last_seq, pp.digest, pp.view, pp.batch))
        return pp

    # -- execution side ---------------------------------------------------------

    def make_spec_responses(self, directive: ExecuteDirective,
                            results_per_request: list[list[int]]):
        """Per-request speculative responses; records result digests so later
        certificates can be checked against our own execution."""
        my = self.cluster.my_id
        inst = self.instances.get(directive.first_seq)
        out = []
        for req, results in zip(directive.batch.requests, results_per_request):
            rdigest = results_digest(results)
            if inst is not None:
                inst.result_digests[(req.client_id, req.request_seq)] = rdigest
            resp = SpecResponse(
                directive.view, directive.first_seq, directive.digest,
                req.client_id, req.request_seq, my, results, rdigest, None,
            )
            resp.signature = self.keys.sign(my, None, spec_response_signed_portion(resp),
                                            self.scheme.spec_response_scheme)
            proc = self.cluster.key_identity_of_client(req.client_id)
            out.append((proc, resp))
        return out

    # -- slow path ----------------------------------------------------------------

    def on_commit_certificate(self, cert: CommitCertificate) -> CertAck | None:
        """Validate a client's 2f+1 response certificate and ack it.

        Unknown sequences are rejected (and counted) rather than triggering
        retransmission.  A certificate that contradicts our own execution is a
        safety violation and raises DivergenceDetected.
        """
        quorum = self.cluster.commit_quorum()
        ids = [rid for rid, _ in cert.responses]
        if len(set(ids)) != len(ids):
            self.count("invalid_cert")
            raise InvalidCertificate("duplicate replica ids in certificate")
        if len(ids) < quorum:
            self.count("invalid_cert")
            raise InvalidCertificate(f"{len(ids)} responses < quorum {quorum}")
        probe = SpecResponse(cert.view, cert.seq, cert.digest, cert.client_id,
                             cert.request_seq, 0, cert.results, cert.result_digest, None)
        for rid, sig in cert.responses:
            if sig.scheme == SCHEME_MAC:
                self.count("invalid_cert")
                raise InvalidCertificate("MAC signatures are not third-party verifiable")
            if rid not in self.cluster.replica_ids:
                self.count("invalid_cert")
                raise InvalidCertificate(f"unknown replica id {rid}")
            probe.replica_id = rid
            try:
                ok = self.keys.verify(rid, self.cluster.my_id,
                                      spec_response_signed_portion(probe), sig)
            except MissingKey:
                ok = False
            if not ok:
                self.count("invalid_cert")
                raise InvalidCertificate(f"bad response signature from replica {rid}")

        inst = self.instances.get(cert.seq)
        if inst is None or inst.phase < PHASE_EXECUTED:
            self.count("cert_unknown_seq")
            return None
        own = inst.result_digests.get((cert.client_id, cert.request_seq))
        if own is not None and own != cert.result_digest:
            raise DivergenceDetected(
                f"certificate for seq {cert.seq} request ({cert.client_id},"
                f" {cert.request_seq}) proves a different execution result"
            )
        self.count("cert_committed_acked")
        ack = CertAck(cert.client_id, cert.request_seq, cert.seq, self.cluster.my_id, None)
        ack.signature = self.keys.sign(self.cluster.my_id, None,
                                       cert_ack_signed_portion(ack),
                                       self.scheme.spec_response_scheme)
        return ack


class SpecRequestTracker:
    """Client-side collection for one outstanding speculative request."""

    __slots__ = ("client_id", "request_seq", "submitted_at", "submit_ns", "deadline",
                 "by_digest", "outcome", "cert_sent", "acks")

    def __init__(self, client_id: int, request_seq: int, now: float, timeout: float):
        self.client_id = client_id
        self.request_seq = request_seq
        self.submitted_at = now
        self.submit_ns = 0
        self.deadline = now + timeout
        # result digest -> {replica id: (response fields needed for the cert)}
        self.by_digest: dict[bytes, dict[int, SpecResponse]] = {}
        self.outcome: str | None = None
        self.cert_sent = False
        self.acks: set[int] = set()

    def on_response(self, resp: SpecResponse, n: int) -> str | None:
        """Record a response; returns FAST_COMPLETE when all n replicas match."""
        if self.outcome is not None or self.cert_sent:
            return None
        group = self.by_digest.setdefault(resp.result_digest, {})
        group[resp.replica_id] = resp
        if len(group) >= n:
            self.outcome = FAST_COMPLETE
            return FAST_COMPLETE
        return None

    def best_group(self) -> tuple[bytes, dict[int, SpecResponse]] | None:
        if not self.by_digest:
            return None
        digest = max(self.by_digest, key=lambda d: len(self.by_digest[d]))
        return digest, self.by_digest[digest]

    def mismatched(self) -> bool:
        return len(self.by_digest) > 1

    def on_timeout(self, quorum: int) -> tuple[str, CommitCertificate | None]:
        """Decide the slow path at the deadline: certificate or failure."""
        best = self.best_group()
        if best is None:
            self.outcome = FAILED
            return FAILED, None
        digest, group = best
        if len(group) < quorum:
            self.outcome = FAILED
            return FAILED, None
        sample = next(iter(group.values()))
        cert = CommitCertificate(
            self.client_id, self.request_seq, sample.view, sample.seq, sample.digest,
            sample.results, digest,
            [(rid, group[rid].signature) for rid in sorted(group)][:quorum],
        )
        self.cert_sent = True
        return "cert_sent", cert

    def on_ack(self, ack: CertAck, quorum: int) -> str | None:
        if not self.cert_sent or self.outcome is not None:
            return None
        self.acks.add(ack.replica_id)
        if len(self.acks) >= quorum:
            self.outcome = CERT_COMMITTED
            return CERT_COMMITTED
        return None


def client_collect(tracker: SpecRequestTracker, responses: list[SpecResponse],
                   n: int, quorum: int, now: float | None = None):
    """Synchronous helper: feed responses, then apply the timeout rule.

    Returns (outcome, certificate-or-None); outcome is FAST_COMPLETE,
    "cert_sent" (caller must broadcast and await acks), or FAILED.
    """
    for resp in responses:
        if tracker.on_response(resp, n) == FAST_COMPLETE:
            return FAST_COMPLETE, None
    now = time.monotonic() if now is None else now
    if now < tracker.deadline:
        return None, None
    return tracker.on_timeout(quorum)
