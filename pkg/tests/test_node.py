"""Whole-replica runtime tests: an in-process cluster of threaded replicas
over loopback, exercising end-to-end consensus, ordered execution, artifact
dumps, checkpoint pruning, pool neutrality, and utilization accounting."""

from __future__ import annotations

import time
from pathlib import Path

import pytest

from pipebft.bench import free_ports
from pipebft.config import ExperimentConfig, ThreadTopology, WorkloadConfig
from pipebft.messages import ClientResponse, SpecResponse, encode_message
from pipebft.node import ReplicaNode
from pipebft.pipeline import UnknownRoute, WorkQueue
from pipebft.safety import check_run_safety
from pipebft.transport import Mesh
from pipebft.workload import PbftResponseTracker, RequestFactory

from conftest import CLIENT_PROCS, N_DEFAULT


def base_cfg(**overrides) -> ExperimentConfig:
    params = dict(
        protocol="pbft",
        n=N_DEFAULT,
        f=1,
        batch_size=20,
        batch_timeout_ms=10.0,
        workload=WorkloadConfig(num_clients=4, num_req=64),
        duration_s=5.0,
        warmup_s=0.5,
        checkpoint_delta=10_000,
        num_client_procs=CLIENT_PROCS,
        log_batches="primary",
    )
    params.update(overrides)
    return ExperimentConfig(**params)


class InProcCluster:
    def __init__(self, cfg: ExperimentConfig, keystores, run_dir: Path):
        self.cfg = cfg
        self.run_dir = run_dir
        ports = free_ports(cfg.n)
        self.addresses = {rid: ("127.0.0.1", ports[rid]) for rid in range(cfg.n)}
        self.nodes = []
        for rid in range(cfg.n):
            cluster = cfg.cluster_for(rid, self.addresses)
            self.nodes.append(ReplicaNode(cfg, cluster, keystores[rid], run_dir=run_dir))
        for node in self.nodes:  # bind everyone before anyone dials
            node.listen(self.addresses[node.cluster.my_id])
        for node in self.nodes:
            node.start(self.addresses)

    def shutdown(self):
        for node in self.nodes:
            node.shutdown(drain_timeout=4.0)

    def wait_height(self, height: int, timeout: float = 15.0):
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if all(n.chain.height >= height for n in self.nodes):
                return
            time.sleep(0.02)
        heights = [n.chain.height for n in self.nodes]
        raise AssertionError(f"cluster stuck below height {height}: {heights}")


class MiniClient:
    """Single-threaded driver for logical client 0 (process identity n)."""

    def __init__(self, cfg: ExperimentConfig, keystores, addresses):
        self.cfg = cfg
        self.my_id = cfg.n
        self.inbox = WorkQueue()
        self.mesh = Mesh(self.my_id, cfg.n, lambda s, m, f: self.inbox.put(m),
                         input_replica_threads=1, output_threads=1)
        self.mesh.start(None)
        self.mesh.connect_mesh(addresses, retry_window=5.0)
        ks = keystores[self.my_id]
        scheme = cfg.scheme.client_scheme
        self.factory = RequestFactory(cfg.workload, 0, cfg.seed,
                                      lambda d: ks.sign(self.my_id, None, d, scheme))
        self.trackers: dict[int, PbftResponseTracker] = {}
        self.completed = 0

    def submit(self, count: int, to: int = 0):
        for _ in range(count):
            req = self.factory.next_request()
            self.trackers[req.request_seq] = PbftResponseTracker(
                0, req.request_seq, time.time_ns(), 0)
            self.mesh.send_frame(to, encode_message(req))

    def pump_until_complete(self, total: int, timeout: float = 15.0):
        quorum = self.cfg.f + 1
        deadline = time.monotonic() + timeout
        while self.completed < total and time.monotonic() < deadline:
            for msg in self.inbox.drain(timeout=0.05):
                if type(msg) is not ClientResponse:
                    continue
                tracker = self.trackers.get(msg.request_seq)
                if tracker is None:
                    continue
                if tracker.on_response(msg.replica_id, msg.results, quorum) == "ok":
                    self.completed += 1
        if self.completed < total:
            raise AssertionError(f"only {self.completed}/{total} requests completed")

    def stop(self):
        self.mesh.stop()


@pytest.fixture(scope="module")
def finished_run(keystores, tmp_path_factory):
    """One full in-process run plus its artifacts, shared by several tests."""
    run_dir = tmp_path_factory.mktemp("inproc")
    cfg = base_cfg(checkpoint_delta=60)
    cluster = InProcCluster(cfg, keystores, run_dir)
    client = MiniClient(cfg, keystores, cluster.addresses)
    total = 300
    client.submit(total)
    client.pump_until_complete(total)
    cluster.wait_height(1 + total // cfg.batch_size)
    time.sleep(0.3)  # let checkpoint traffic settle
    instance_counts = [len(n.engine.instances) for n in cluster.nodes]
    utilization = [n.registry.thread_utilization() for n in cluster.nodes]
    client.stop()
    cluster.shutdown()
    return cfg, run_dir, cluster, instance_counts, utilization


def test_end_to_end_chains_identical_and_replay_matches(finished_run):
    cfg, run_dir, cluster, _, _ = finished_run
    facts = check_run_safety(run_dir, cfg.n, set(), cfg.workload.active_set)
    assert facts["chain_height"] == 1 + 300 // cfg.batch_size
    assert facts["replayed_requests"] == 300


def test_block_fields_match_proposals(finished_run):
    cfg, run_dir, cluster, _, _ = finished_run
    primary = cluster.nodes[0]
    blocks = primary.chain.blocks
    assert blocks[1].seq == 0
    assert blocks[1].txn_count == cfg.batch_size
    assert blocks[2].seq == cfg.batch_size
    assert all(b.view == 0 for b in blocks)


def test_checkpoint_pruning_released_old_instances(finished_run):
    cfg, _, cluster, instance_counts, _ = finished_run
    # 300 requests, delta=60: stable checkpoints at 60..300; instances below
    # the previous checkpoint (240) are gone
    for node, count in zip(cluster.nodes, instance_counts):
        assert count <= (300 - 240) // cfg.batch_size + 2
        assert all(seq >= 240 for seq in node.engine.instances)


def test_pool_stats_balanced_after_run(finished_run):
    _, run_dir, cluster, _, _ = finished_run
    primary = cluster.nodes[0]
    stats = primary.instance_pool.stats()
    assert stats["acquires"] == 300 // 20
    assert stats["releases"] > 0


def test_utilization_fractions_sane(finished_run):
    _, _, _, _, utilization = finished_run
    for per_node in utilization:
        assert per_node, "no stage clocks registered"
        for role, frac in per_node.items():
            assert 0.0 <= frac <= 1.0


def test_unknown_route_raises(finished_run, keystores):
    cfg, _, cluster, _, _ = finished_run
    node = cluster.nodes[0]
    resp = ClientResponse(0, 0, 0, [1], None)
    from pipebft.crypto import NOSIG_SIGNATURE
    resp.signature = NOSIG_SIGNATURE
    with pytest.raises(UnknownRoute):
        node.route(resp)


def test_pool_neutrality_identical_outputs(keystores, tmp_path_factory):
    """Same workload with pools on vs off: byte-identical chains and state."""
    dumps = {}
    for pool_size in (4096, 0):
        run_dir = tmp_path_factory.mktemp(f"pool{pool_size}")
        cfg = base_cfg(pool_size=pool_size)
        cluster = InProcCluster(cfg, keystores, run_dir)
        client = MiniClient(cfg, keystores, cluster.addresses)
        client.submit(100)
        client.pump_until_complete(100)
        cluster.wait_height(1 + 100 // cfg.batch_size)
        client.stop()
        cluster.shutdown()
        dumps[pool_size] = (
            (run_dir / "chain_0.dump").read_text(),
            (run_dir / "state_0.sha").read_text(),
        )
    assert dumps[4096] == dumps[0]


def test_zyzzyva_node_fast_path(keystores, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("speculative")
    cfg = base_cfg(protocol="zyzzyva")
    cluster = InProcCluster(cfg, keystores, run_dir)
    client = MiniClient(cfg, keystores, cluster.addresses)
    total = 100
    client.submit(total)
    # fast path: every replica answers with speculative evidence
    got: dict[int, set[int]] = {}
    deadline = time.monotonic() + 15.0
    while time.monotonic() < deadline:
        for msg in client.inbox.drain(timeout=0.05):
            if type(msg) is SpecResponse:
                got.setdefault(msg.request_seq, set()).add(msg.replica_id)
        if len(got) == total and all(len(v) == cfg.n for v in got.values()):
            break
    assert len(got) == total
    assert all(len(v) == cfg.n for v in got.values())
    inter_replica = sum(n.counters.get("sent_prepare", 0) +
                        n.counters.get("sent_commit", 0) for n in cluster.nodes)
    assert inter_replica == 0
    client.stop()
    cluster.shutdown()
    check_run_safety(run_dir, cfg.n, set(), cfg.workload.active_set)


def test_idle_cluster_utilization_low(keystores, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("idle")
    cfg = base_cfg()
    cluster = InProcCluster(cfg, keystores, run_dir)
    time.sleep(1.2)
    for node in cluster.nodes:
        for role, frac in node.registry.thread_utilization().items():
            assert frac < 0.05, f"{role} busy while idle: {frac}"
    cluster.shutdown()


def test_saturated_single_batch_thread_exceeds_worker(keystores, tmp_path_factory):
    """Heavy load with one batch thread: signature verification saturates the
    batch stage before the worker stage at the primary."""
    run_dir = tmp_path_factory.mktemp("sat")
    cfg = base_cfg(topology=ThreadTopology(batch_threads=1),
                   batch_size=50,
                   workload=WorkloadConfig(num_clients=8, num_req=256))
    cluster = InProcCluster(cfg, keystores, run_dir)
    client = MiniClient(cfg, keystores, cluster.addresses)
    total = 1200
    client.submit(total)
    client.pump_until_complete(total, timeout=30.0)
    util = cluster.nodes[0].registry.thread_utilization()
    client.stop()
    cluster.shutdown()
    assert util["batch_0"] > util["worker"], util
