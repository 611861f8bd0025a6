"""Shared numeric types, step-size schedules, seed derivation and trace records."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


class DimensionError(ValueError):
    """Raised when vectors or matrices have incompatible shapes."""


def as_vec(v, dim: int | None = None, name: str = "vector") -> np.ndarray:
    """Return `v` as a contiguous 1-D float64 array, checking finiteness and length."""
    arr = np.ascontiguousarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionError(f"{name} has length {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


# --------------------------------------------------------------------------
# Seeds and random streams
# --------------------------------------------------------------------------

def splitmix64_mix(z: int) -> int:
    """SplitMix64 output finalizer; a bijection on 64-bit integers."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_worker_seed(master_seed: int, node_id: int) -> int:
    """Derive the 64-bit seed of one worker's private stream.

    The value is ``mix(master_seed XOR (node_id * 0x9E3779B97F4A7C15 mod 2**64))``
    where ``mix`` is the SplitMix64 finalizer. Multiplication by an odd
    constant, XOR with a fixed value and the finalizer are all bijections on
    64-bit integers, so the map is injective in ``node_id`` for
    ``0 <= node_id < 2**64``.
    """
    if node_id < 0:
        raise ValueError("node_id must be non-negative")
    return splitmix64_mix((master_seed & MASK64) ^ ((node_id * GOLDEN_GAMMA) & MASK64))


def make_rng(seed: int) -> np.random.Generator:
    """Philox4x64-10 counter-based generator keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=seed & MASK64))


def worker_rng(master_seed: int, node_id: int) -> np.random.Generator:
    return make_rng(derive_worker_seed(master_seed, node_id))


# --------------------------------------------------------------------------
# Step-size schedules
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Constant:
    eta: float

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("constant step size must be positive")

    def __call__(self, t: int) -> float:
        return self.eta


@dataclass(frozen=True)
class InverseTime:
    """eta_t = 8 / (mu * (t + a))."""

    mu: float
    a: float

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("InverseTime requires mu > 0")
        if not self.a >= 1:
            raise ValueError("InverseTime requires a >= 1")

    def __call__(self, t: int) -> float:
        return 8.0 / (self.mu * (t + self.a))


@dataclass(frozen=True)
class MultiplicativeDecay:
    """eta_t = eta0 * (1 - rate) ** t."""

    eta0: float
    rate: float

    def __post_init__(self):
        if not self.eta0 > 0:
            raise ValueError("MultiplicativeDecay requires eta0 > 0")
        if not 0 <= self.rate < 1:
            raise ValueError("MultiplicativeDecay requires 0 <= rate < 1")

    def __call__(self, t: int) -> float:
        return self.eta0 * (1.0 - self.rate) ** t


StepSchedule = Union[Constant, InverseTime, MultiplicativeDecay]


def schedule_eval(sched: StepSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    return sched(t)


def schedule_to_dict(sched: StepSchedule) -> dict:
    if isinstance(sched, Constant):
        return {"kind": "constant", "eta": sched.eta}
    if isinstance(sched, InverseTime):
        return {"kind": "inverse_time", "mu": sched.mu, "a": sched.a}
    if isinstance(sched, MultiplicativeDecay):
        return {"kind": "multiplicative_decay", "eta0": sched.eta0, "rate": sched.rate}
    raise TypeError(f"unknown schedule {sched!r}")


def schedule_from_dict(d: dict) -> StepSchedule:
    kind = d.get("kind")
    if kind == "constant":
        return Constant(float(d["eta"]))
    if kind == "inverse_time":
        return InverseTime(float(d["mu"]), float(d["a"]))
    if kind == "multiplicative_decay":
        return MultiplicativeDecay(float(d["eta0"]), float(d["rate"]))
    raise ValueError(f"unknown schedule kind {kind!r}")


# --------------------------------------------------------------------------
# Configuration and constants
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Hyperparameters of one simulated run.

    ``record_every`` adds intra-round trace rows every that many iterations;
    0 disables them. Rows at communication rounds are always recorded.

    ``schedule_clock`` selects what the step-size schedules are indexed by:
    ``"iteration"`` (global local-step counter t) or ``"round"`` (the index
    of the current communication round, t // sync_gap).
    """

    n_workers: int
    total_iters: int
    sync_gap: int
    primal_schedule: StepSchedule
    dual_schedule: StepSchedule
    snapshot_gap: int = 1
    batch_size: int = 1
    master_seed: int = 0
    record_every: int = 0
    schedule_clock: str = "iteration"

    def __post_init__(self):
        for name in ("n_workers", "total_iters", "sync_gap", "snapshot_gap", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.record_every < 0:
            raise ValueError("record_every must be >= 0")
        if self.schedule_clock not in ("iteration", "round"):
            raise ValueError("schedule_clock must be 'iteration' or 'round'")

    def step_sizes(self, t: int) -> tuple[float, float]:
        """Primal and dual step sizes used by local step t."""
        k = t if self.schedule_clock == "iteration" else t // self.sync_gap
        return self.primal_schedule(k), self.dual_schedule(k)

    def to_dict(self) -> dict:
        return {
            "n_workers": self.n_workers,
            "total_iters": self.total_iters,
            "sync_gap": self.sync_gap,
            "snapshot_gap": self.snapshot_gap,
            "primal_schedule": schedule_to_dict(self.primal_schedule),
            "dual_schedule": schedule_to_dict(self.dual_schedule),
            "batch_size": self.batch_size,
            "master_seed": self.master_seed,
            "record_every": self.record_every,
            "schedule_clock": self.schedule_clock,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        return cls(
            n_workers=int(d["n_workers"]),
            total_iters=int(d["total_iters"]),
            sync_gap=int(d.get("sync_gap", 1)),
            snapshot_gap=int(d.get("snapshot_gap", 1)),
            primal_schedule=schedule_from_dict(d["primal_schedule"]),
            dual_schedule=schedule_from_dict(d.get("dual_schedule", d["primal_schedule"])),
            batch_size=int(d.get("batch_size", 1)),
            master_seed=int(d.get("master_seed", 0)),
            record_every=int(d.get("record_every", 0)),
            schedule_clock=str(d.get("schedule_clock", "iteration")),
        )


@dataclass(frozen=True)
class ProblemConstants:
    """Smoothness ``L``, strong concavity / PL modulus ``mu`` and noise bound ``sigma2``."""

    L: float
    mu: float = 0.0
    sigma2: float = 0.0
    G_x: float | None = None
    D: float | None = None

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError("L must be positive")
        if self.mu < 0 or self.sigma2 < 0:
            raise ValueError("mu and sigma2 must be non-negative")
        if self.mu > self.L:
            raise ValueError("L must be >= mu")

    @property
    def kappa(self) -> float:
        if self.mu <= 0:
            raise ValueError("kappa is undefined for mu = 0")
        return self.L / self.mu

    @property
    def beta(self) -> float:
        """Smoothness of the envelope function, L + kappa * L."""
        return self.L + self.kappa * self.L


# --------------------------------------------------------------------------
# Worker state and trace
# --------------------------------------------------------------------------

class WorkerState:
    """Local iterates of one node.

    Iterates are stored as the round anchor (the last broadcast average, shared
    by every worker) plus a private displacement. Averaging the displacements
    and adding the result to the anchor makes a synchronization with ``tau=1``
    reproduce a synchronous SGDA step bit for bit.
    """

    __slots__ = ("node_id", "anchor_x", "anchor_y", "dx", "dy", "rng")

    def __init__(self, node_id: int, x: np.ndarray, y: np.ndarray, rng: np.random.Generator):
        self.node_id = node_id
        self.rng = rng
        self.reset(x, y)

    def reset(self, x: np.ndarray, y: np.ndarray) -> None:
        self.anchor_x = x
        self.anchor_y = y
        self.dx = np.zeros_like(x)
        self.dy = np.zeros_like(y)

    @property
    def x(self) -> np.ndarray:
        return self.anchor_x + self.dx

    @property
    def y(self) -> np.ndarray:
        return self.anchor_y + self.dy


@dataclass
class TraceRecord:
    iter: int
    comm_round: int
    deviation_x: float
    deviation_y: float
    at_sync: bool = True
    objective: float | None = None
    dist_to_saddle: float | None = None
    robust_loss: float | None = None
    robust_accuracy: float | None = None
    envelope_grad_norm: float | None = None
    wallclock: float = 0.0


METRIC_FIELDS = ("objective", "dist_to_saddle", "robust_loss", "robust_accuracy", "envelope_grad_norm")


def average_vectors(vs: Sequence[np.ndarray]) -> np.ndarray:
    """Componentwise mean, summed in list order then divided once."""
    if len(vs) == 0:
        raise ValueError("cannot average an empty list")
    first = np.asarray(vs[0], dtype=np.float64)
    acc = first.copy()
    for v in vs[1:]:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != first.shape:
            raise DimensionError(f"shape mismatch: {v.shape} vs {first.shape}")
        acc += v
    acc /= len(vs)
    return acc


def snap_count(v: float) -> int:
    """max(1, floor(v)), treating values within 1e-9 (relative) of an integer as that integer."""
    if not math.isfinite(v):
        raise ValueError("count must be finite")
    r = round(v)
    if abs(v - r) <= 1e-9 * max(1.0, abs(v)):
        v = r
    return max(1, math.floor(v))
