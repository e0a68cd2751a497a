"""Run metrics: per-process CSV emission and post-run aggregation.

Each replica writes ``metrics.csv`` (counter and utilization rows) and each
client process ``latency_<k>.csv`` with one row per completed request:
client_id, request_seq, submit_ns, complete_ns, outcome.  The orchestrator
merges these into one MetricsReport row per run.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from pathlib import Path


@dataclass
class MetricsReport:
    label: str = ""
    protocol: str = ""
    throughput_txns_per_s: float = 0.0
    throughput_ops_per_s: float = 0.0
    latency_mean_ms: float = 0.0
    latency_p50_ms: float = 0.0
    latency_p99_ms: float = 0.0
    completed: int = 0
    window_s: float = 0.0
    outcomes: dict = field(default_factory=dict)
    message_counts: dict = field(default_factory=dict)
    utilization: dict = field(default_factory=dict)

    def flat(self) -> dict:
        row = asdict(self)
        for group in ("outcomes", "message_counts", "utilization"):
            sub = row.pop(group)
            for k, v in sorted(sub.items()):
                row[f"{group}.{k}"] = v
        return row


def percentile(sorted_values: list[float], q: float) -> float:
    """Nearest-rank percentile over an already sorted list."""
    if not sorted_values:
        return 0.0
    idx = min(len(sorted_values) - 1, max(0, round(q * (len(sorted_values) - 1))))
    return sorted_values[idx]


def write_metrics_csv(path: str | Path, counters: dict, utilization: dict,
                      extra: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "key", "value"])
        for key in sorted(counters):
            w.writerow(["counter", key, counters[key]])
        for key in sorted(utilization):
            w.writerow(["utilization", key, utilization[key]])
        for key in sorted(extra or {}):
            w.writerow(["info", key, (extra or {})[key]])


def read_metrics_csv(path: str | Path) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {"counter": {}, "utilization": {}, "info": {}}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        for row in reader:
            if len(row) != 3:
                continue
            kind, key, value = row
            try:
                out.setdefault(kind, {})[key] = float(value)
            except ValueError:
                out.setdefault(kind, {})[key] = value
    return out


class LatencyLog:
    """Buffered per-request latency records for one client process."""

    HEADER = ["client_id", "request_seq", "submit_ns", "complete_ns", "outcome"]

    def __init__(self, path: str | Path):
        self._fh = open(path, "w", newline="", buffering=1 << 16)
        self._w = csv.writer(self._fh)
        self._w.writerow(self.HEADER)

    def record(self, client_id: int, request_seq: int, submit_ns: int,
               complete_ns: int, outcome: str) -> None:
        self._w.writerow([client_id, request_seq, submit_ns, complete_ns, outcome])

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()


def read_latency_csv(path: str | Path) -> list[tuple[int, int, int, int, str]]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            if len(row) != 5:
                continue
            rows.append((int(row[0]), int(row[1]), int(row[2]), int(row[3]), row[4]))
    return rows


def write_report_csv(path: str | Path, reports: list[MetricsReport]) -> None:
    rows = [r.flat() for r in reports]
    keys: list[str] = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, restval="")
        w.writeheader()
        for row in rows:
            w.writerow(row)
