"""Shared fixtures: key material, cluster configs, and an in-process
synchronous cluster for driving consensus engines deterministically."""

from __future__ import annotations

import random

import pytest
from hypothesis import settings

from pipebft.config import ClusterConfig, SchemeConfig
from pipebft.crypto import KeyStore, generate_key_file
from pipebft.messages import (
    Commit,
    CommitCertificate,
    Prepare,
    PrePrepare,
    decode_message,
    encode_message,
)
from pipebft.pbft import PbftEngine
from pipebft.zyzzyva import ZyzzyvaEngine

settings.register_profile("ci", deadline=None, max_examples=60)
settings.load_profile("ci")

N_DEFAULT = 4
CLIENT_PROCS = 2


@pytest.fixture(scope="session")
def key_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("keys") / "cluster.keys"
    generate_key_file(path, list(range(N_DEFAULT + CLIENT_PROCS)), include_slow=True)
    return path


@pytest.fixture(scope="session")
def keystores(key_path):
    return {i: KeyStore.load(key_path, i) for i in range(N_DEFAULT + CLIENT_PROCS)}


def make_cluster(my_id: int, n: int = N_DEFAULT, f: int = 1) -> ClusterConfig:
    return ClusterConfig(n=n, f=f, my_id=my_id, num_client_procs=CLIENT_PROCS)


class LocalNet:
    """Synchronous in-process cluster of consensus engines.

    Outbound messages round-trip through the codec and queue up per receiver;
    ``pump`` delivers until quiescence, optionally shuffling delivery order
    across (sender, receiver) pairs while preserving per-pair FIFO.  Engine
    directives are captured per replica instead of being executed.
    """

    def __init__(self, keystores, protocol: str = "pbft", n: int = N_DEFAULT,
                 f: int = 1, scheme: SchemeConfig | None = None, qc: int = 4096):
        self.n = n
        self.scheme = scheme or SchemeConfig()
        self.engines = {}
        self.directives = {rid: [] for rid in range(n)}
        self.sent = {rid: [] for rid in range(n)}       # messages each replica broadcast
        self.channels: dict[tuple[int, int], list] = {}  # (src, dst) -> frames
        self.muted: set[int] = set()
        engine_cls = PbftEngine if protocol == "pbft" else ZyzzyvaEngine
        for rid in range(n):
            cluster = make_cluster(rid, n=n, f=f)
            self.engines[rid] = engine_cls(
                cluster, keystores[rid], self.scheme, qc,
                broadcast=self._broadcast_from(rid),
                send_client=lambda proc, msg: None,
                schedule=self.directives[rid].append,
            )

    def _broadcast_from(self, src: int):
        def broadcast(msg):
            self.sent[src].append(msg)
            if src in self.muted:
                return
            frame = encode_message(msg)
            for dst in range(self.n):
                if dst != src:
                    self.channels.setdefault((src, dst), []).append(frame)
        return broadcast

    def inject(self, src: int, dst: int, msg) -> None:
        self.channels.setdefault((src, dst), []).append(encode_message(msg))

    def _deliver_one(self, dst: int, frame: bytes) -> None:
        msg = decode_message(frame)
        engine = self.engines[dst]
        t = type(msg)
        if t is PrePrepare:
            engine.on_preprepare(msg)
        elif t is Prepare:
            engine.on_prepare(msg)
        elif t is Commit:
            engine.on_commit(msg)
        elif t is CommitCertificate:
            engine.on_commit_certificate(msg)
        else:
            raise AssertionError(f"unroutable test message {t.__name__}")

    def pump(self, rng: random.Random | None = None, max_rounds: int = 10_000) -> int:
        """Deliver until no messages remain; returns count delivered."""
        delivered = 0
        for _ in range(max_rounds):
            live = [pair for pair, frames in self.channels.items() if frames]
            if not live:
                return delivered
            if rng is not None:
                pair = rng.choice(live)
            else:
                pair = live[0]
            frame = self.channels[pair].pop(0)
            self._deliver_one(pair[1], frame)
            delivered += 1
        raise AssertionError("message pump did not quiesce")

    def client_request_batch(self, keystores, count: int = 3, client_id: int = 0,
                             proc_identity: int | None = None, ops: int = 1):
        """Candidate requests signed by the owning client process."""
        from pipebft.messages import ClientRequest, Operation, OP_WRITE, finish_request

        proc = proc_identity if proc_identity is not None else self.n + (client_id % CLIENT_PROCS)
        ks = keystores[proc]
        scheme = self.scheme.client_scheme
        out = []
        for i in range(count):
            req = ClientRequest(client_id, i, [Operation(OP_WRITE, 10 + i, 77 + i)
                                               for _ in range(ops)], b"", None)
            finish_request(req, lambda data: ks.sign(proc, None, data, scheme))
            out.append(req)
        return out


@pytest.fixture
def localnet(keystores):
    def factory(**kwargs) -> LocalNet:
        return LocalNet(keystores, **kwargs)
    return factory
