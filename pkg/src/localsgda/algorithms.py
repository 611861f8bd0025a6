"""Local SGDA and Local SGDA+ with periodic model averaging, and theorem-derived presets."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from localsgda.core import (
    METRIC_FIELDS,
    Constant,
    InverseTime,
    ProblemConstants,
    RunConfig,
    StepSchedule,
    TraceRecord,
    WorkerState,
    as_vec,
    average_vectors,
    snap_count,
    worker_rng,
)
from localsgda.metrics import compute_deviation
from localsgda.problems.base import MinimaxProblem

DIVERGENCE_BOUND = 1e15


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, node: int):
        super().__init__(f"iterate diverged at iteration {iteration} on node {node}")
        self.iteration = iteration
        self.node = node


@dataclass(frozen=True)
class RoundView:
    """Read-only snapshot handed to metric hooks at every recorded row."""

    t: int
    comm_round: int
    at_sync: bool
    x_bar: np.ndarray
    y_bar: np.ndarray
    workers: tuple[WorkerState, ...]
    problem: MinimaxProblem


MetricHook = Callable[[RoundView], "Mapping[str, float] | None"]


@dataclass
class RunResult:
    x_bar: np.ndarray
    y_bar: np.ndarray
    trace: list[TraceRecord]
    communication_rounds_used: int
    total_local_steps: int
    averaging_rounds: int = 0
    snapshot_rounds: int = 0


def _readonly(v: np.ndarray) -> np.ndarray:
    v = v.view()
    v.flags.writeable = False
    return v


def _check_iterate(v: np.ndarray, t: int, node: int) -> None:
    if not np.all(np.isfinite(v)) or np.abs(v).max(initial=0.0) > DIVERGENCE_BOUND:
        raise DivergenceError(t, node)


def _simulate(problem: MinimaxProblem, cfg: RunConfig, x0, y0, hooks: Sequence[MetricHook],
              plus: bool, n_threads: int) -> RunResult:
    x0 = as_vec(x0, problem.d_x, "x0")
    y0 = as_vec(y0, problem.d_y, "y0")
    if cfg.n_workers != problem.n_nodes:
        raise ValueError(f"config has {cfg.n_workers} workers but problem has {problem.n_nodes} nodes")
    T, tau, S = cfg.total_iters, cfg.sync_gap, cfg.snapshot_gap
    project = problem.has_dual_projection
    workers = [WorkerState(i, x0, y0, worker_rng(cfg.master_seed, i)) for i in range(problem.n_nodes)]
    snapshot = x0
    start = time.perf_counter()
    trace: list[TraceRecord] = []
    rounds = snapshots = 0

    def local_segment(w: WorkerState, t0: int, t1: int) -> None:
        node = w.node_id
        for t in range(t0, t1):
            x, y = w.x, w.y
            batch = problem.sample(node, cfg.batch_size, w.rng)
            if plus:
                gx = problem.batch_grad(node, x, y, batch)[0]
                gy = problem.batch_grad(node, snapshot, y, batch)[1]
            else:
                gx, gy = problem.batch_grad(node, x, y, batch)
            eta_x, eta_y = cfg.step_sizes(t)
            w.dx = w.dx - eta_x * gx
            if project:
                w.dy = problem.project_dual(y + eta_y * gy) - w.anchor_y
            else:
                w.dy = w.dy + eta_y * gy
            _check_iterate(w.x, t + 1, node)
            _check_iterate(w.y, t + 1, node)

    def run_segment(t0: int, t1: int) -> None:
        errors: list[DivergenceError] = []

        def task(w):
            try:
                local_segment(w, t0, t1)
            except DivergenceError as exc:
                errors.append(exc)

        if n_threads > 1:
            with ThreadPoolExecutor(max_workers=n_threads) as pool:
                list(pool.map(task, workers))
        else:
            for w in workers:
                task(w)
        if errors:
            raise min(errors, key=lambda e: (e.iteration, e.node))

    def averages() -> tuple[np.ndarray, np.ndarray]:
        ax, ay = workers[0].anchor_x, workers[0].anchor_y
        return ax + average_vectors([w.dx for w in workers]), ay + average_vectors([w.dy for w in workers])

    def record(t: int, at_sync: bool, x_bar, y_bar) -> None:
        dev_x, dev_y = compute_deviation(workers, x_bar, y_bar)
        rec = TraceRecord(iter=t, comm_round=rounds, deviation_x=dev_x, deviation_y=dev_y, at_sync=at_sync)
        view = RoundView(t, rounds, at_sync, _readonly(x_bar), _readonly(y_bar), tuple(workers), problem)
        for hook in hooks:
            for key, val in (hook(view) or {}).items():
                if key not in METRIC_FIELDS:
                    raise KeyError(f"hook returned unknown metric {key!r}")
                setattr(rec, key, float(val))
        rec.wallclock = time.perf_counter() - start
        trace.append(rec)

    record(0, True, x0, y0)
    t = 0
    while t < T:
        nxt = min(T, (t // tau + 1) * tau)
        if plus:
            nxt = min(nxt, (t // S + 1) * S)
        if cfg.record_every:
            nxt = min(nxt, (t // cfg.record_every + 1) * cfg.record_every)
        run_segment(t, nxt)
        t = nxt
        sync = t % tau == 0 or t == T
        if sync:
            x_bar, y_bar = averages()
            for w in workers:
                w.reset(x_bar, y_bar)
            rounds += 1
        if plus and t % S == 0:
            # after a same-step averaging this is exactly the broadcast average
            snapshot = averages()[0]
            snapshots += 1
        if sync:
            record(t, True, x_bar, y_bar)
        elif cfg.record_every and t % cfg.record_every == 0:
            record(t, False, *averages())

    x_bar, y_bar = averages()
    return RunResult(
        x_bar=x_bar,
        y_bar=y_bar,
        trace=trace,
        communication_rounds_used=rounds + snapshots,
        total_local_steps=T * problem.n_nodes,
        averaging_rounds=rounds,
        snapshot_rounds=snapshots,
    )


def run_local_sgda(problem: MinimaxProblem, cfg: RunConfig, x0, y0,
                   metrics_hooks: Sequence[MetricHook] = (), n_threads: int = 0) -> RunResult:
    """Local SGDA: tau local SGDA steps per node between model averages.

    Every worker starts a round from the broadcast average, runs ``sync_gap``
    steps ``x <- x - eta_x(t) g_x``, ``y <- y + eta_y(t) g_y`` on minibatches
    from its own stream (projecting y when the problem defines a dual
    constraint), then the server averages. A shorter last round is run when
    ``sync_gap`` does not divide ``total_iters``.

    Args:
        problem: per-node gradient oracle.
        cfg: run hyperparameters; ``snapshot_gap`` is ignored.
        x0, y0: common initial point.
        metrics_hooks: callables invoked at every recorded row; each returns a
            mapping from TraceRecord metric names to values.
        n_threads: run the workers' local segments on this many threads.
            The result does not depend on it.

    Raises:
        DivergenceError: an iterate became non-finite or exceeded 1e15.
    """
    return _simulate(problem, cfg, x0, y0, metrics_hooks, plus=False, n_threads=n_threads)


def run_local_sgda_plus(problem: MinimaxProblem, cfg: RunConfig, x0, y0,
                        metrics_hooks: Sequence[MetricHook] = (), n_threads: int = 0) -> RunResult:
    """Local SGDA+: as Local SGDA, but dual gradients are taken at a stale snapshot of x.

    The snapshot starts at ``x0`` and is replaced by the current worker
    average every ``snapshot_gap`` iterations (after averaging when both
    happen on the same iteration). Snapshot broadcasts count towards
    ``communication_rounds_used``.
    """
    return _simulate(problem, cfg, x0, y0, metrics_hooks, plus=True, n_threads=n_threads)


# --------------------------------------------------------------------------
# presets
# --------------------------------------------------------------------------

REGIMES = ("scsc_homog", "scsc_hetero", "ncsc", "ncpl", "ncoc")


@dataclass(frozen=True)
class PresetRequest:
    regime: str
    n: int
    T: int
    constants: ProblemConstants | None
    variant: str = "thm4_a"  # ncpl only: "thm4_a" (tau=T^1/3, S=T^2/3) or "thm4_b" (tau=S=T^1/3/n^2/3)
    snapshot_rule: str = "theorem"  # or "tau_squared" (S = tau^2)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.variant not in ("thm4_a", "thm4_b"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.snapshot_rule not in ("theorem", "tau_squared"):
            raise ValueError(f"unknown snapshot rule {self.snapshot_rule!r}")


@dataclass(frozen=True)
class Preset:
    tau: int
    S: int | None
    primal: StepSchedule
    dual: StepSchedule


class MissingConstantsError(ValueError):
    pass


def preset_hyperparams(req: PresetRequest) -> Preset:
    """Synchronization gap, snapshot gap and step sizes prescribed for each regime."""
    n, T, c = req.n, float(req.T), req.constants
    if c is None:
        raise MissingConstantsError(f"regime {req.regime} needs problem constants")
    needs_mu = req.regime in ("scsc_homog", "scsc_hetero")
    if needs_mu and not c.mu > 0:
        raise MissingConstantsError(f"regime {req.regime} needs mu > 0")

    S = None
    if req.regime == "scsc_homog":
        tau = snap_count(T / (n * math.log(T)))
        eta = 4 * math.log(T) / (c.mu * T)
        primal = dual = Constant(eta)
    elif req.regime == "scsc_hetero":
        tau = snap_count(math.sqrt(T / n))
        k2 = c.kappa**2
        a = max(2048 * k2 * tau, 1024 * math.sqrt(2) * tau * k2, 256 * k2)
        primal = dual = InverseTime(c.mu, a)
    elif req.regime == "ncsc":
        tau = snap_count((T / n) ** (1 / 3))
        primal = Constant(n ** (1 / 3) / (c.L * T ** (2 / 3)))
        dual = Constant(2 / (c.L * math.sqrt(T)))
    elif req.regime == "ncpl":
        if req.variant == "thm4_a":
            tau = snap_count(T ** (1 / 3))
            S = snap_count(T ** (2 / 3))
        else:
            tau = S = snap_count(T ** (1 / 3) / n ** (2 / 3))
        primal = Constant(n ** (1 / 3) / (c.L * T ** (2 / 3)))
        dual = Constant(n ** (1 / 3) / (c.L * math.sqrt(T)))
    else:  # ncoc
        tau = snap_count(T ** (1 / 3) / n ** (1 / 6))
        S = snap_count(T ** (2 / 3))
        primal = Constant(1 / (c.L * T ** (5 / 6)))
        dual = Constant(1 / (4 * c.L * math.sqrt(T)))
    if S is not None and req.snapshot_rule == "tau_squared":
        S = tau * tau
    return Preset(tau=tau, S=S, primal=primal, dual=dual)
