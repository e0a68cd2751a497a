"""Benchmark orchestrator: spawns local clusters as processes, runs timed
experiments and parameter sweeps, injects backup failures, and aggregates
per-process CSVs into one report row per run.

Every run ends with the safety suite: non-faulty replicas must produce
byte-identical validating chains and identical state hashes, and the recorded
batch log must replay to the same state through the reference executor.  Any
divergence raises SafetyViolation and fails the run loudly.
"""

from __future__ import annotations

import json
import signal
import socket
import statistics
import subprocess
import sys
import threading
import time
from dataclasses import replace
from pathlib import Path

from .config import (
    CannotFailPrimary,
    ExperimentConfig,
    SCHEME_DS_SLOW,
    SchemeConfig,
    ThreadTopology,
    dump_experiment_config,
)
from .crypto import generate_key_file
from .metrics import (
    MetricsReport,
    percentile,
    read_latency_csv,
    read_metrics_csv,
    write_report_csv,
)
from .safety import SafetyViolation, check_run_safety

COMPLETED_OUTCOMES = ("ok", "fast_complete", "cert_committed")


class ClusterStartFailure(RuntimeError):
    pass


def free_ports(count: int) -> list[int]:
    socks = []
    ports = []
    for _ in range(count):
        s = socket.socket()
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports


def _tail(path: Path, lines: int = 12) -> str:
    try:
        return "\n".join(path.read_text().splitlines()[-lines:])
    except OSError:
        return "<no output>"


def prepare_run_dir(cfg: ExperimentConfig, run_dir: Path) -> dict:
    run_dir.mkdir(parents=True, exist_ok=True)
    ports = free_ports(cfg.n)
    addresses = {rid: ["127.0.0.1", ports[rid]] for rid in range(cfg.n)}
    keyfile = run_dir / "cluster.keys"
    identities = list(range(cfg.n + cfg.num_client_procs))
    include_slow = SCHEME_DS_SLOW in (cfg.scheme.client_scheme, cfg.scheme.replica_scheme,
                                      cfg.scheme.spec_response_scheme)
    generate_key_file(keyfile, identities, include_slow=include_slow)
    cluster_meta = {"addresses": addresses, "keyfile": str(keyfile)}
    (run_dir / "cluster.json").write_text(json.dumps(cluster_meta))
    dump_experiment_config(cfg, run_dir / "exp.json")
    return cluster_meta


def _await_quiescence(run_dir: Path, cfg: ExperimentConfig, failed_ids: set[int],
                      replicas: dict, timeout: float = 30.0) -> None:
    """Wait until all healthy replicas report the same stable chain height.

    Replicas drain at different speeds after clients stop; terminating before
    the slowest one finished consuming the committed stream would truncate
    its chain and turn an ordinary lag into a false safety alarm.
    """
    healthy = [rid for rid in range(cfg.n) if rid not in failed_ids]
    deadline = time.monotonic() + timeout
    stable_rounds = 0
    last: list[str] | None = None
    while time.monotonic() < deadline:
        if any(replicas[rid].poll() is not None for rid in healthy):
            return  # someone died; let the shutdown path surface it
        snapshot = []
        for rid in healthy:
            try:
                snapshot.append((run_dir / f"progress_{rid}").read_text())
            except OSError:
                snapshot.append(f"missing_{rid}")
        if len(set(snapshot)) == 1 and snapshot == last:
            stable_rounds += 1
            if stable_rounds >= 2:
                return
        else:
            stable_rounds = 0
        last = snapshot
        time.sleep(0.35)


def run_experiment(cfg: ExperimentConfig, run_dir: str | Path) -> MetricsReport:
    """One timed run: spawn cluster, drive clients, stop, verify, aggregate."""
    run_dir = Path(run_dir)
    prepare_run_dir(cfg, run_dir)
    cfg_path = run_dir / "exp.json"
    cluster_path = run_dir / "cluster.json"
    replicas: dict[int, subprocess.Popen] = {}
    clients: dict[int, subprocess.Popen] = {}
    timers: list[threading.Timer] = []
    failed_ids = {rid for rid, _ in cfg.failures}

    def spawn(module: str, ident: str, extra: list[str]) -> subprocess.Popen:
        out = open(run_dir / f"{ident}.out", "w")
        return subprocess.Popen(
            [sys.executable, "-m", module, "--config", str(cfg_path),
             "--cluster", str(cluster_path), "--run-dir", str(run_dir)] + extra,
            stdout=out, stderr=subprocess.STDOUT,
        )

    def cleanup():
        for t in timers:
            t.cancel()
        for p in list(replicas.values()) + list(clients.values()):
            if p.poll() is None:
                p.kill()

    try:
        for rid in range(cfg.n):
            replicas[rid] = spawn("pipebft.node", f"replica_{rid}",
                                  ["--replica-id", str(rid)])
        deadline = time.monotonic() + 30.0
        for rid in range(cfg.n):
            ready = run_dir / f"ready_{rid}"
            while not ready.exists():
                if replicas[rid].poll() is not None or time.monotonic() > deadline:
                    raise ClusterStartFailure(
                        f"replica {rid} failed to start:\n"
                        f"{_tail(run_dir / f'replica_{rid}.out')}")
                time.sleep(0.05)

        for k in range(cfg.num_client_procs):
            clients[k] = spawn("pipebft.client", f"client_{k}",
                               ["--proc-index", str(k)])

        for rid, at in cfg.failures:
            def fail(rid=rid):
                proc = replicas.get(rid)
                if proc is None or proc.poll() is not None:
                    return
                if cfg.failure_mode == "kill":
                    proc.kill()
                else:
                    proc.send_signal(signal.SIGUSR1)
            t = threading.Timer(at, fail)
            t.start()
            timers.append(t)

        client_deadline = time.monotonic() + cfg.duration_s + 25.0
        for k, proc in clients.items():
            remaining = max(0.5, client_deadline - time.monotonic())
            try:
                code = proc.wait(timeout=remaining)
            except subprocess.TimeoutExpired:
                raise ClusterStartFailure(
                    f"client {k} did not finish:\n{_tail(run_dir / f'client_{k}.out')}")
            if code == 4:
                raise SafetyViolation(
                    f"client {k} observed conflicting results:\n"
                    f"{_tail(run_dir / f'client_{k}.out')}")
            if code != 0:
                raise ClusterStartFailure(
                    f"client {k} exited {code}:\n{_tail(run_dir / f'client_{k}.out')}")

        _await_quiescence(run_dir, cfg, failed_ids, replicas)
        for rid, proc in replicas.items():
            if proc.poll() is None:
                proc.terminate()
        for rid, proc in replicas.items():
            if rid in failed_ids and cfg.failure_mode == "kill":
                proc.wait(timeout=5.0)
                continue
            try:
                code = proc.wait(timeout=15.0)
            except subprocess.TimeoutExpired:
                proc.kill()
                raise ClusterStartFailure(
                    f"replica {rid} hung on shutdown:\n{_tail(run_dir / f'replica_{rid}.out')}")
            if code != 0 and rid not in failed_ids:
                raise SafetyViolation(
                    f"replica {rid} exited {code}:\n{_tail(run_dir / f'replica_{rid}.out')}")
    finally:
        cleanup()

    facts = check_run_safety(run_dir, cfg.n, failed_ids, cfg.workload.active_set)
    report = aggregate(cfg, run_dir)
    report.message_counts["chain_height"] = facts["chain_height"]
    report.message_counts["replayed_requests"] = facts["replayed_requests"]
    write_report_csv(run_dir / "report.csv", [report])
    return report


def aggregate(cfg: ExperimentConfig, run_dir: Path) -> MetricsReport:
    starts, ends = [], []
    outcomes: dict[str, float] = {}
    records = []
    for k in range(cfg.num_client_procs):
        latency_path = run_dir / f"latency_{k}.csv"
        if latency_path.exists():
            records.extend(read_latency_csv(latency_path))
        meta_path = run_dir / f"client_metrics_{k}.csv"
        if meta_path.exists():
            meta = read_metrics_csv(meta_path)
            starts.append(int(meta["info"]["start_wall_ns"]))
            ends.append(int(meta["info"]["end_wall_ns"]))
            for key, v in meta["counter"].items():
                outcomes[key] = outcomes.get(key, 0) + v
    if not starts:
        raise ClusterStartFailure("no client metrics produced")
    w0 = max(starts) + int(cfg.warmup_s * 1e9)
    w1 = min(starts) + int(cfg.duration_s * 1e9)
    window_s = max(1e-9, (w1 - w0) / 1e9)

    lat_ms = sorted((c - s) / 1e6 for _, _, s, c, o in records
                    if o in COMPLETED_OUTCOMES and w0 <= c <= w1)
    completed = len(lat_ms)

    message_counts: dict[str, float] = {}
    utilization: dict[str, float] = {}
    for rid in range(cfg.n):
        path = run_dir / f"metrics_{rid}.csv"
        if not path.exists():
            continue
        data = read_metrics_csv(path)
        for key, v in data["counter"].items():
            message_counts[key] = message_counts.get(key, 0) + v
        for key, v in data["utilization"].items():
            utilization[f"r{rid}.{key}"] = v

    report = MetricsReport(
        label=cfg.label or f"{cfg.protocol}_{cfg.topology.label()}",
        protocol=cfg.protocol,
        throughput_txns_per_s=completed / window_s,
        throughput_ops_per_s=completed * cfg.workload.ops_per_txn / window_s,
        latency_mean_ms=statistics.fmean(lat_ms) if lat_ms else 0.0,
        latency_p50_ms=percentile(lat_ms, 0.50),
        latency_p99_ms=percentile(lat_ms, 0.99),
        completed=completed,
        window_s=window_s,
        outcomes=outcomes,
        message_counts=message_counts,
        utilization=utilization,
    )
    return report


def run_median(cfg: ExperimentConfig, out_dir: str | Path,
               repetitions: int | None = None) -> tuple[MetricsReport, list[MetricsReport]]:
    """Repeat a run and return the median-throughput report (odd counts give
    a true median row)."""
    out_dir = Path(out_dir)
    reps = repetitions if repetitions is not None else cfg.repetitions
    reports = []
    for i in range(reps):
        reports.append(run_experiment(cfg, out_dir / f"run{i}"))
    ranked = sorted(reports, key=lambda r: r.throughput_txns_per_s)
    median = ranked[len(ranked) // 2]
    write_report_csv(out_dir / "runs.csv", reports)
    return median, reports


SWEEPABLE = ("batch_size", "ops_per_txn", "payload_bytes", "scheme", "storage",
             "num_clients", "topology", "protocol", "failures", "spec_timeout_ms",
             "num_req")


def apply_param(cfg: ExperimentConfig, param: str, value) -> ExperimentConfig:
    if param not in SWEEPABLE:
        raise ValueError(f"unknown sweep parameter {param!r} (one of {SWEEPABLE})")
    label = f"{param}={value}"
    if param in ("ops_per_txn", "payload_bytes", "num_clients", "num_req"):
        wl = replace(cfg.workload, **{param: int(value)})
        return replace(cfg, workload=wl, label=label)
    if param == "scheme":
        return replace(cfg, scheme=SchemeConfig.named(str(value)), label=label)
    if param == "topology":
        return replace(cfg, topology=ThreadTopology.from_label(str(value)), label=label)
    if param == "failures":
        count = int(value)
        return replace(cfg, failures=tuple((rid, 0.0) for rid in range(1, count + 1)),
                       label=label)
    if param in ("batch_size",):
        return replace(cfg, batch_size=int(value), label=label)
    if param == "spec_timeout_ms":
        return replace(cfg, spec_timeout_ms=float(value), label=label)
    return replace(cfg, **{param: value}, label=label)


def sweep(param: str, values: list, base_cfg: ExperimentConfig,
          out_dir: str | Path) -> list[MetricsReport]:
    """One median report row per value; writes sweep.csv under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        cfg = apply_param(base_cfg, param, value)
        median, _ = run_median(cfg, out_dir / f"{param}_{value}")
        rows.append(median)
    write_report_csv(out_dir / "sweep.csv", rows)
    return rows
