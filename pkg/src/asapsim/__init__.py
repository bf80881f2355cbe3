"""Simulator for asynchronous persistent-memory undo logging and its baselines."""

from .asap import AsapScheme
from .crashcheck import (RecoveryReport, SweepResult, ValidStateSet, crash_sweep, oracle, recover,
                         recover_redo, recover_undo)
from .harness import RunConfig, compare, crashtest, resolve_config, suite, sweep
from .machine import (MachineConfig, Metrics, PMImage, RegionId, RunResult, SimulationError, Simulator,
                      run)
from .schemes import SCHEME_NAMES, make_scheme
from .trace import Trace, WorkloadSpec, generate, parse_trace, render_trace, validate

__version__ = "0.1.0"

__all__ = [
    "AsapScheme", "MachineConfig", "Metrics", "PMImage", "RecoveryReport", "RegionId", "RunConfig",
    "RunResult", "SCHEME_NAMES", "SimulationError", "Simulator", "SweepResult", "Trace",
    "ValidStateSet", "WorkloadSpec", "compare", "crash_sweep", "crashtest", "generate", "make_scheme",
    "oracle", "parse_trace", "recover", "recover_redo", "recover_undo", "render_trace",
    "resolve_config", "run", "suite", "sweep", "validate",
]
