"""Acceptance gate: every criterion runs at its stated tolerance against real
local clusters (n=4, f=1, 10 s runs, 2 s warmup unless a scenario states
otherwise) and prints one PASS/FAIL line.

Scenario runs are cached for the session so criteria can share baselines
(e.g. the three-phase 1E2B median serves the pipeline trend, the
crafted-vs-speculative comparison, and the failure baseline).
"""

from __future__ import annotations

import os
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import pytest

from pipebft.bench import run_experiment, run_median
from pipebft.config import (
    ExperimentConfig,
    SchemeConfig,
    ThreadTopology,
    WorkloadConfig,
)
from pipebft.messages import Commit, Prepare
from pipebft.pipeline import CheckpointCoordinator
from pipebft.safety import check_run_safety

from test_pbft import signed_prepare, test_equivocating_backup_cannot_split_commits

pytestmark = pytest.mark.acceptance

DURATION = float(os.environ.get("PIPEBFT_ACCEPT_DURATION", "10"))
WARMUP = min(2.0, DURATION / 4)


def base_cfg(**overrides) -> ExperimentConfig:
    params = dict(duration_s=DURATION, warmup_s=WARMUP, repetitions=1)
    params.update(overrides)
    return ExperimentConfig(**params)


class AcceptanceLab:
    """Session-wide scenario cache with per-scenario wall clocks."""

    def __init__(self, root: Path):
        self.root = root
        self.cache: dict[str, object] = {}
        self.walls: dict[str, float] = {}

    def single(self, key: str, cfg: ExperimentConfig):
        if key not in self.cache:
            t0 = time.monotonic()
            self.cache[key] = run_experiment(replace(cfg, label=key), self.root / key)
            self.walls[key] = time.monotonic() - t0
        return self.cache[key]

    def median(self, key: str, cfg: ExperimentConfig, reps: int = 3):
        if key not in self.cache:
            t0 = time.monotonic()
            med, _ = run_median(replace(cfg, label=key), self.root / key, repetitions=reps)
            self.walls[key] = (time.monotonic() - t0) / reps
            self.cache[key] = med
        return self.cache[key]


@pytest.fixture(scope="session")
def lab(tmp_path_factory):
    return AcceptanceLab(tmp_path_factory.mktemp("acceptance"))


def verdict(criterion: str, ok: bool, detail: str) -> None:
    line = f"[{criterion}] {'PASS' if ok else 'FAIL'}: {detail}"
    print(line, flush=True)
    assert ok, line


# -- 1 & 2: safety suite and ordering oracle -----------------------------------------

def test_criterion_01_safety_suite(lab):
    """Chain dumps of all non-faulty replicas byte-identical and validating
    after a benchmark run; scenario runtime < 1 min."""
    report = lab.single("pbft_default", base_cfg())
    run_dir = lab.root / "pbft_default"
    facts = check_run_safety(run_dir, 4, set(), 600_000)  # raises on divergence
    wall = lab.walls["pbft_default"]
    verdict("criterion 1", facts["chain_height"] > 1 and wall < 60.0,
            f"identical validated chains at height {facts['chain_height']}, "
            f"scenario wall {wall:.1f}s (< 60s)")


def test_criterion_02_ordering_oracle(lab):
    """Reference replay of the committed batch log reproduces every replica's
    final state exactly (adversarial directive shuffling is covered by the
    queue-array differential tests in the property suite)."""
    report = lab.single("pbft_default", base_cfg())
    run_dir = lab.root / "pbft_default"
    facts = check_run_safety(run_dir, 4, set(), 600_000)
    verdict("criterion 2",
            facts["replayed_requests"] >= report.completed > 0,
            f"replayed {facts['replayed_requests']} committed requests; state "
            f"hash matched all 4 replicas")


# -- 3: quorum unit suite ------------------------------------------------------------

def test_criterion_03_quorum_suite(keystores, localnet):
    net = localnet()
    pp = net.engines[0].primary_on_request_batch(
        net.client_request_batch(keystores, count=2))
    e0 = net.engines[0]
    ok = True
    detail = []

    p1 = signed_prepare(keystores, Prepare, 1, 0, 0, pp.digest, net.scheme, [0])
    e0.on_prepare(p1)
    e0.on_prepare(p1)  # duplicate never advances
    ok &= not e0.instances[0].commit_sent
    e0.on_prepare(signed_prepare(keystores, Prepare, 2, 0, 0, pp.digest, net.scheme, [0]))
    ok &= e0.instances[0].commit_sent
    detail.append("prepare quorum at exactly 2 distinct backups")

    dup = signed_prepare(keystores, Commit, 1, 0, 0, pp.digest, net.scheme, [0])
    e0.on_commit(dup)
    e0.on_commit(dup)
    ok &= not net.directives[0]
    e0.on_commit(signed_prepare(keystores, Commit, 2, 0, 0, pp.digest, net.scheme, [0]))
    ok &= len(net.directives[0]) == 1
    detail.append("commit quorum at exactly 3 distinct replicas (self included)")

    emitted, stables = [], []
    coord = CheckpointCoordinator(100, 3, emitted.append,
                                  lambda seq, est: stables.append(seq))
    d = bytes(32)
    coord.on_checkpoint(100, d, 0)
    coord.on_checkpoint(100, d, 0)
    coord.on_checkpoint(100, d, 1)
    ok &= stables == []
    coord.on_checkpoint(100, d, 2)
    ok &= stables == [100]
    detail.append("checkpoint stability at 3 identical messages")

    test_equivocating_backup_cannot_split_commits(localnet, keystores)
    detail.append("64-trace equivocation check: no split commits")
    verdict("criterion 3", ok, "; ".join(detail))


# -- 4 & 5: pipeline trend and crafted-vs-speculative ---------------------------------

TOPOLOGIES = ("0E0B", "1E0B", "1E1B", "1E2B")


def _topology_medians(lab):
    out = {}
    for label in TOPOLOGIES:
        cfg = base_cfg(topology=ThreadTopology.from_label(label))
        out[label] = lab.median(f"pbft_{label}", cfg).throughput_txns_per_s
    return out


def test_criterion_04_pipeline_trend(lab):
    tput = _topology_medians(lab)
    ordered = (tput["1E2B"] > tput["1E1B"] > tput["1E0B"] > tput["0E0B"])
    verdict("criterion 4", ordered,
            "3-run medians " + " ".join(f"{t}={tput[t]:.0f}" for t in TOPOLOGIES)
            + (" strictly increasing with pipeline depth" if ordered else
               " not strictly increasing with pipeline depth"))


def test_criterion_05_crafted_vs_speculative(lab):
    pbft = lab.median("pbft_1E2B", base_cfg(topology=ThreadTopology.from_label("1E2B")))
    zyz = lab.median("zyz_0E0B", base_cfg(protocol="zyzzyva",
                                          topology=ThreadTopology.from_label("0E0B")))
    ok = pbft.throughput_txns_per_s >= zyz.throughput_txns_per_s
    verdict("criterion 5", ok,
            f"three-phase @1E2B {pbft.throughput_txns_per_s:.0f} txns/s vs "
            f"speculative @0E0B {zyz.throughput_txns_per_s:.0f} txns/s")


# -- 6: batching --------------------------------------------------------------------

BATCH_POINTS = (1, 10, 100, 1000, 5000)


def test_criterion_06_batching(lab):
    tput = {}
    for bs in BATCH_POINTS:
        tput[bs] = lab.single(f"batch_{bs}", base_cfg(batch_size=bs)).throughput_txns_per_s
    ratio = tput[100] / max(tput[1], 1e-9)
    curve = [tput[b] for b in BATCH_POINTS]
    peak = max(range(5), key=lambda i: curve[i])
    interior_max = peak not in (0, 4)
    non_monotone = interior_max and curve[4] < curve[peak]
    verdict("criterion 6", ratio >= 5.0 and non_monotone,
            f"batch=100 / batch=1 = {ratio:.1f}x (>= 5x); curve "
            + " ".join(f"{b}:{tput[b]:.0f}" for b in BATCH_POINTS)
            + f"; maximum at interior point batch={BATCH_POINTS[peak]}")


# -- 7: multi-operation transactions ---------------------------------------------------

OPS_POINTS = (1, 10, 50)


def test_criterion_07_multi_op(lab):
    rows = {}
    for ops in OPS_POINTS:
        cfg = base_cfg(workload=WorkloadConfig(ops_per_txn=ops))
        rows[ops] = lab.single(f"ops_{ops}", cfg)
    txns = [rows[o].throughput_txns_per_s for o in OPS_POINTS]
    opss = [rows[o].throughput_ops_per_s for o in OPS_POINTS]
    ok = txns[0] > txns[1] > txns[2] and opss[0] < opss[1] < opss[2]
    verdict("criterion 7", ok,
            "txns/s " + " > ".join(f"{t:.0f}" for t in txns)
            + " while ops/s " + " < ".join(f"{o:.0f}" for o in opss))


# -- 8: message size ---------------------------------------------------------------------

def test_criterion_08_message_size(lab):
    small = lab.single("payload_8k", base_cfg(
        workload=WorkloadConfig(payload_bytes=8192))).throughput_txns_per_s
    big = lab.single("payload_64k", base_cfg(
        workload=WorkloadConfig(payload_bytes=65536))).throughput_txns_per_s
    drop = 1 - big / max(small, 1e-9)
    verdict("criterion 8", drop >= 0.25,
            f"64 KB payload {big:.0f} txns/s vs 8 KB {small:.0f} txns/s: "
            f"{drop:.0%} decrease (>= 25%)")


# -- 9: cryptographic schemes ---------------------------------------------------------------

SCHEME_ORDER = ("nosig", "mac_ds_fast", "ds_fast", "ds_slow")


def test_criterion_09_crypto_schemes(lab):
    tput = {}
    for name in SCHEME_ORDER:
        cfg = base_cfg(scheme=SchemeConfig.named("default" if name == "mac_ds_fast" else name))
        tput[name] = lab.median(f"scheme_{name}", cfg).throughput_txns_per_s
    ok = (tput["nosig"] > tput["mac_ds_fast"] > tput["ds_fast"] > tput["ds_slow"])
    verdict("criterion 9", ok,
            "3-run medians " + " > ".join(f"{n}={tput[n]:.0f}" for n in SCHEME_ORDER))


# -- 10: storage backend -----------------------------------------------------------------------

def test_criterion_10_storage(lab):
    mem = lab.single("pbft_default", base_cfg()).throughput_txns_per_s
    filed = lab.single("storage_file", base_cfg(storage="filebacked")).throughput_txns_per_s
    ratio = mem / max(filed, 1e-9)
    verdict("criterion 10", ratio >= 3.0,
            f"in-memory {mem:.0f} txns/s vs file-backed {filed:.0f} txns/s: "
            f"{ratio:.1f}x (>= 3x)")


# -- 11: client scaling ---------------------------------------------------------------------------

CLIENT_POINTS = (32, 256, 512)


def test_criterion_11_clients(lab):
    rows = {}
    for nc in CLIENT_POINTS:
        cfg = base_cfg(workload=WorkloadConfig(num_clients=nc, num_req=8))
        rows[nc] = lab.single(f"clients_{nc}", cfg)
    small, medium, large = (rows[nc] for nc in CLIENT_POINTS)
    gain = large.throughput_txns_per_s / max(medium.throughput_txns_per_s, 1e-9) - 1
    p50_up = (small.latency_p50_ms < medium.latency_p50_ms < large.latency_p50_ms)
    verdict("criterion 11", gain < 0.10 and p50_up,
            f"throughput {small.throughput_txns_per_s:.0f} -> "
            f"{medium.throughput_txns_per_s:.0f} -> {large.throughput_txns_per_s:.0f} "
            f"(final step {gain:+.1%} < +10%); p50 "
            f"{small.latency_p50_ms:.0f} < {medium.latency_p50_ms:.0f} < "
            f"{large.latency_p50_ms:.0f} ms")


# -- 12: failures ------------------------------------------------------------------------------------

def test_criterion_12_failures(lab):
    pbft_base = lab.median("pbft_1E2B", base_cfg())
    pbft_fail = lab.median("pbft_fail1", base_cfg(failures=((1, 0.0),)))
    pbft_drop = 1 - pbft_fail.throughput_txns_per_s / pbft_base.throughput_txns_per_s

    zyz_base = lab.median("zyz_default", base_cfg(protocol="zyzzyva"))
    zyz_fail = lab.median("zyz_fail1", base_cfg(protocol="zyzzyva", failures=((1, 0.0),)))
    zyz_drop = 1 - zyz_fail.throughput_txns_per_s / zyz_base.throughput_txns_per_s
    timeout_ms = base_cfg().spec_timeout_ms

    ok = (pbft_drop < 0.15 and zyz_drop > 0.50
          and zyz_fail.latency_p50_ms >= timeout_ms)
    verdict("criterion 12 (n=4)", ok,
            f"three-phase drop {pbft_drop:+.1%} (< 15%); speculative drop "
            f"{zyz_drop:+.1%} (> 50%) with p50 {zyz_fail.latency_p50_ms:.0f} ms "
            f">= client timeout {timeout_ms:.0f} ms")


def test_criterion_12_n16_liveness(lab):
    cfg = base_cfg(
        n=16, f=5, batch_size=50,
        workload=WorkloadConfig(num_clients=16, num_req=4),
        failures=tuple((rid, 0.0) for rid in range(1, 6)),
    )
    report = lab.single("n16_f5", cfg)
    verdict("criterion 12 (n=16 smoke)", report.completed > 0,
            f"with f=5 of 16 backups stopped the cluster completed "
            f"{report.completed} requests ({report.throughput_txns_per_s:.0f} txns/s)")


# -- 13: component property suites ----------------------------------------------------------------------

def test_criterion_13_property_suites():
    modules = [
        "tests/test_messages.py",            # codec round-trip + fuzz
        "tests/test_pipeline.py",            # queue-array differential + pools
        "tests/test_workload.py",            # zipfian statistics
        "tests/test_node.py::test_pool_neutrality_identical_outputs",
    ]
    t0 = time.monotonic()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", *modules],
                          capture_output=True, text=True, cwd=Path(__file__).parent.parent)
    wall = time.monotonic() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout else ""
    verdict("criterion 13", proc.returncode == 0 and wall < 300.0,
            f"property suites green in {wall:.0f}s (< 300s): {tail}")
