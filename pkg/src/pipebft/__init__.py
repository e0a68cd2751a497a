"""pipebft: a pipelined permissioned-blockchain replica framework.

Classical three-phase consensus and single-phase speculative consensus over
the same deeply pipelined replica runtime, plus a process-spawning benchmark
harness for throughput/latency factor analysis on one machine.
"""

__version__ = "0.1.0"

from .config import (  # noqa: F401
    CannotFailPrimary,
    ClusterConfig,
    ConfigError,
    ExperimentConfig,
    SchemeConfig,
    ThreadTopology,
    WorkloadConfig,
)
from .safety import SafetyViolation  # noqa: F401
