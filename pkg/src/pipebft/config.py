"""Cluster, workload and experiment configuration.

Identities are small integers: replicas occupy 0..n-1 and client processes
n..n+num_client_procs-1.  Logical clients (the workload's notion of a client)
are a separate numbering 0..num_clients-1; logical client L signs with the key
of the client process it is multiplexed onto (L mod num_client_procs).
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


# Signature scheme tags (wire/byte values, also stored in key files).
SCHEME_NOSIG = 0
SCHEME_MAC = 1
SCHEME_DS_FAST = 2
SCHEME_DS_SLOW = 3

SCHEME_NAMES = {
    "nosig": SCHEME_NOSIG,
    "mac": SCHEME_MAC,
    "ds_fast": SCHEME_DS_FAST,
    "ds_slow": SCHEME_DS_SLOW,
}
SCHEME_LABELS = {v: k for k, v in SCHEME_NAMES.items()}


def scheme_from_name(name: str) -> int:
    try:
        return SCHEME_NAMES[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown signature scheme {name!r}") from None


@dataclass(frozen=True)
class SchemeConfig:
    """Which signature scheme each traffic class uses.

    ``client_scheme`` covers client-originated requests, ``replica_scheme``
    replica-to-replica traffic and ordinary replica-to-client responses.
    Speculative responses and certificate acks must be third-party
    verifiable, so they use ``spec_response_scheme`` which is never MAC.
    """

    client_scheme: int = SCHEME_DS_FAST
    replica_scheme: int = SCHEME_MAC
    spec_response_scheme: int = SCHEME_DS_FAST

    def __post_init__(self):
        if self.client_scheme == SCHEME_MAC:
            raise ConfigError("client requests need a publicly verifiable scheme or nosig")
        if self.spec_response_scheme == SCHEME_MAC:
            # Certificates forward these signatures to third parties.
            raise ConfigError("speculative responses cannot use MAC")

    @classmethod
    def named(cls, name: str) -> "SchemeConfig":
        """The four benchmark configurations, by sweep label."""
        name = name.lower()
        if name == "nosig":
            return cls(SCHEME_NOSIG, SCHEME_NOSIG, SCHEME_NOSIG)
        if name in ("default", "mac_ds_fast"):
            return cls(SCHEME_DS_FAST, SCHEME_MAC, SCHEME_DS_FAST)
        if name == "ds_fast":
            return cls(SCHEME_DS_FAST, SCHEME_DS_FAST, SCHEME_DS_FAST)
        if name == "ds_slow":
            return cls(SCHEME_DS_SLOW, SCHEME_DS_SLOW, SCHEME_DS_SLOW)
        raise ConfigError(f"unknown scheme config {name!r}")

    def label(self) -> str:
        if self.client_scheme == self.replica_scheme == SCHEME_NOSIG:
            return "nosig"
        if self.replica_scheme == SCHEME_MAC:
            return "mac_ds_fast"
        return SCHEME_LABELS[self.replica_scheme]


@dataclass(frozen=True)
class ThreadTopology:
    """Per-replica thread counts.

    ``execute_threads`` and ``batch_threads`` may be zero, in which case the
    worker thread absorbs those stages (the 0E/0B benchmark setups).  More
    than one executor is rejected: ordered execution needs a single drainer.
    """

    input_threads: int = 3
    output_threads: int = 2
    batch_threads: int = 2
    worker_threads: int = 1
    execute_threads: int = 1
    checkpoint_threads: int = 1

    def __post_init__(self):
        if self.worker_threads != 1:
            raise ConfigError("exactly one worker thread is supported")
        if self.execute_threads not in (0, 1):
            raise ConfigError("execute threads must be 0 (merged into worker) or 1")
        if self.checkpoint_threads != 1:
            raise ConfigError("exactly one checkpoint thread is supported")
        if self.input_threads < 2 or self.output_threads < 1:
            raise ConfigError("need at least 2 input threads and 1 output thread")
        if self.batch_threads < 0:
            raise ConfigError("batch threads must be >= 0")

    def label(self) -> str:
        return f"{self.execute_threads}E{self.batch_threads}B"

    @classmethod
    def from_label(cls, label: str) -> "ThreadTopology":
        """Parse labels like ``1E2B`` / ``0e0b``."""
        s = label.upper().replace(" ", "")
        try:
            e, rest = s.split("E")
            b = rest.rstrip("B")
            return cls(execute_threads=int(e), batch_threads=int(b))
        except Exception:
            raise ConfigError(f"bad topology label {label!r}") from None


@dataclass(frozen=True)
class ClusterConfig:
    """Membership for one cluster: replica count, fault bound, addressing."""

    n: int
    f: int
    my_id: int
    num_client_procs: int = 1
    addresses: dict[int, tuple[str, int]] = field(default_factory=dict)
    view: int = 0

    def __post_init__(self):
        if self.n < 3 * self.f + 1:
            raise ConfigError(f"n={self.n} violates n >= 3f+1 for f={self.f}")
        if self.f < 0 or self.n < 1:
            raise ConfigError("need n >= 1, f >= 0")

    @property
    def replica_ids(self) -> range:
        return range(self.n)

    @property
    def client_proc_ids(self) -> range:
        return range(self.n, self.n + self.num_client_procs)

    @property
    def all_ids(self) -> range:
        return range(self.n + self.num_client_procs)

    def primary_of(self, view: int) -> int:
        return view % self.n

    @property
    def primary(self) -> int:
        return self.primary_of(self.view)

    def is_primary(self, rid: int | None = None) -> bool:
        rid = self.my_id if rid is None else rid
        return rid == self.primary

    def key_identity_of_client(self, logical_client: int) -> int:
        """Key-owning process identity for a logical client id."""
        return self.n + (logical_client % self.num_client_procs)

    def prepare_quorum(self) -> int:
        return 2 * self.f

    def commit_quorum(self) -> int:
        return 2 * self.f + 1

    def checkpoint_quorum(self) -> int:
        return 2 * self.f + 1

    def response_quorum(self) -> int:
        return self.f + 1


@dataclass(frozen=True)
class WorkloadConfig:
    """Client request generation parameters."""

    active_set: int = 600_000
    zipfian_skew: float = 0.0
    ops_per_txn: int = 1
    payload_bytes: int = 0
    client_batch: int = 1
    num_clients: int = 64
    num_req: int = 8

    def __post_init__(self):
        if self.active_set <= 0 or self.num_clients <= 0 or self.num_req <= 0:
            raise ConfigError("active_set, num_clients, num_req must be positive")
        if not 1 <= self.ops_per_txn <= 50:
            raise ConfigError("ops_per_txn must be in 1..50")
        if not 0 <= self.payload_bytes <= 65_536:
            raise ConfigError("payload_bytes must be in 0..65536")
        if self.client_batch < 1:
            raise ConfigError("client_batch must be >= 1")
        if self.zipfian_skew < 0 or self.zipfian_skew >= 1:
            raise ConfigError("zipfian_skew must be in [0, 1)")

    @property
    def in_flight(self) -> int:
        return self.num_clients * self.num_req


DEFAULT_QC_CAP = 1 << 17


@dataclass(frozen=True)
class ExperimentConfig:
    """One benchmark run: protocol, cluster shape, workload, instrumentation."""

    protocol: str = "pbft"
    n: int = 4
    f: int = 1
    topology: ThreadTopology = field(default_factory=ThreadTopology)
    batch_size: int = 100
    batch_timeout_ms: float = 20.0
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    storage: str = "inmemory"
    duration_s: float = 10.0
    warmup_s: float = 2.0
    seed: int = 1
    checkpoint_delta: int = 10_000
    qc_cap: int = DEFAULT_QC_CAP
    pool_size: int = 4096
    spec_timeout_ms: float = 400.0
    request_timeout_ms: float = 30_000.0
    num_client_procs: int = 2
    client_verify_responses: bool = False
    failures: tuple[tuple[int, float], ...] = ()
    failure_mode: str = "kill"
    log_batches: str = "primary"
    repetitions: int = 1
    label: str = ""

    def __post_init__(self):
        if self.protocol not in ("pbft", "zyzzyva"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.n < 3 * self.f + 1:
            raise ConfigError(f"n={self.n} violates n >= 3f+1 for f={self.f}")
        if self.duration_s <= self.warmup_s:
            raise ConfigError("duration must exceed warmup")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.storage not in ("inmemory", "filebacked"):
            raise ConfigError(f"unknown storage backend {self.storage!r}")
        if self.failure_mode not in ("kill", "mute"):
            raise ConfigError(f"unknown failure mode {self.failure_mode!r}")
        if self.log_batches not in ("none", "primary", "all"):
            raise ConfigError(f"unknown log_batches mode {self.log_batches!r}")
        primary = 0
        for rid, at in self.failures:
            if rid == primary:
                raise CannotFailPrimary(f"replica {rid} is the primary")
            if not 0 < rid < self.n:
                raise ConfigError(f"failure target {rid} is not a backup id")
            if at < 0:
                raise ConfigError("failure time must be >= 0")

    @property
    def qc(self) -> int:
        """Execution queue-array size: twice the maximum in-flight requests."""
        return min(2 * self.workload.num_clients * self.workload.num_req, self.qc_cap)

    def cluster_for(self, my_id: int, addresses: dict[int, tuple[str, int]]) -> ClusterConfig:
        return ClusterConfig(
            n=self.n,
            f=self.f,
            my_id=my_id,
            num_client_procs=self.num_client_procs,
            addresses=addresses,
        )


class CannotFailPrimary(ConfigError):
    """Primary replacement is out of scope, so the primary may not be failed."""


def _cfg_from_mapping(data: dict) -> ExperimentConfig:
    data = dict(data)
    if "topology" in data and isinstance(data["topology"], str):
        data["topology"] = ThreadTopology.from_label(data["topology"])
    elif isinstance(data.get("topology"), dict):
        data["topology"] = ThreadTopology(**data["topology"])
    if isinstance(data.get("workload"), dict):
        data["workload"] = WorkloadConfig(**data["workload"])
    if isinstance(data.get("scheme"), str):
        data["scheme"] = SchemeConfig.named(data["scheme"])
    elif isinstance(data.get("scheme"), dict):
        sc = {k: scheme_from_name(v) if isinstance(v, str) else v for k, v in data["scheme"].items()}
        data["scheme"] = SchemeConfig(**sc)
    if isinstance(data.get("failures"), list):
        data["failures"] = tuple((int(r), float(t)) for r, t in data["failures"])
    try:
        return ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    """Load an experiment config from a .json or .toml file."""
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".toml":
        data = tomllib.loads(raw.decode())
    elif path.suffix == ".json":
        data = json.loads(raw)
    else:
        raise ConfigError(f"config must be .json or .toml, got {path.suffix!r}")
    if not isinstance(data, dict):
        raise ConfigError("config root must be a table/object")
    return _cfg_from_mapping(data)


def dump_experiment_config(cfg: ExperimentConfig, path: str | Path) -> None:
    data = asdict(cfg)
    data["failures"] = [list(pair) for pair in cfg.failures]
    Path(path).write_text(json.dumps(data, indent=2))
