"""Simulator for communication-efficient distributed minimax optimization (Local SGDA / Local SGDA+)."""

from localsgda.algorithms import (
    DivergenceError,
    Preset,
    PresetRequest,
    RunResult,
    preset_hyperparams,
    run_local_sgda,
    run_local_sgda_plus,
)
from localsgda.core import (
    Constant,
    InverseTime,
    MultiplicativeDecay,
    ProblemConstants,
    RunConfig,
    TraceRecord,
    WorkerState,
    average_vectors,
    derive_worker_seed,
    schedule_eval,
)

__version__ = "0.1.0"

__all__ = [
    "Constant",
    "DivergenceError",
    "InverseTime",
    "MultiplicativeDecay",
    "Preset",
    "PresetRequest",
    "ProblemConstants",
    "RunConfig",
    "RunResult",
    "TraceRecord",
    "WorkerState",
    "average_vectors",
    "derive_worker_seed",
    "preset_hyperparams",
    "run_local_sgda",
    "run_local_sgda_plus",
    "schedule_eval",
]
