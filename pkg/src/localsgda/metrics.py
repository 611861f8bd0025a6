"""Diagnostics: local-model deviation, robust loss, heterogeneity and stationarity measures."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from localsgda.core import DimensionError
from localsgda.problems.base import MissingOracleError, project_ball


@dataclass(frozen=True)
class HeterogeneityReport:
    delta_x: float
    delta_y: float
    zeta_x: float
    zeta_y: float
    n_probe_points: int


@dataclass(frozen=True)
class MoreauEstimate:
    prox_point: np.ndarray
    grad_norm_sq: float
    inner_solver_residual: float


def compute_deviation(workers: Sequence, x_bar: np.ndarray, y_bar: np.ndarray) -> tuple[float, float]:
    """Mean squared distance of the local models to the given averages."""
    if len(workers) == 0:
        raise ValueError("need at least one worker")
    sx = sy = 0.0
    for w in workers:
        x, y = w.x, w.y
        if x.shape != x_bar.shape or y.shape != y_bar.shape:
            raise DimensionError("worker iterate and average have different shapes")
        dx = x - x_bar
        dy = y - y_bar
        sx += float(dx @ dx)
        sy += float(dy @ dy)
    n = len(workers)
    return sx / n, sy / n


def robust_loss(prob, w, inner_steps: int = 100, inner_lr: float = 0.01, radius: float = 1.0,
                return_delta: bool = False):
    """Objective at an adversarial perturbation found by projected gradient ascent.

    Starts from delta = 0 and takes ``inner_steps`` full-gradient ascent steps
    on the problem's pooled evaluation set, projecting onto the ball of
    ``radius`` after each step.
    """
    if inner_steps < 1:
        raise ValueError("inner_steps must be >= 1")
    if not inner_lr > 0:
        raise ValueError("inner_lr must be positive")
    w = np.asarray(w, dtype=np.float64)
    if hasattr(prob, "dual_evaluator"):
        value, grad = prob.dual_evaluator(w)
    else:
        value = lambda d: prob.eval_value(w, d)  # noqa: E731
        grad = lambda d: prob.eval_dual_grad(w, d)  # noqa: E731
    delta = np.zeros(prob.d_y)
    for _ in range(inner_steps):
        delta = project_ball(delta + inner_lr * grad(delta), radius)
    loss = value(delta)
    return (loss, delta) if return_delta else loss


def heterogeneity_at_optimum(problem) -> tuple[float, float]:
    """Mean squared norm of each node's gradient at the global saddle point."""
    x_star, y_star = problem.saddle_point()
    sx = sy = 0.0
    for i in range(problem.n_nodes):
        gx, gy = problem.full_grad(i, x_star, y_star)
        sx += float(gx @ gx)
        sy += float(gy @ gy)
    return sx / problem.n_nodes, sy / problem.n_nodes


def _dissimilarity_at(problem, x, y) -> tuple[float, float]:
    grads = [problem.full_grad(i, x, y) for i in range(problem.n_nodes)]
    gx_bar = np.mean([g[0] for g in grads], axis=0)
    gy_bar = np.mean([g[1] for g in grads], axis=0)
    zx = sum(float(np.sum((g[0] - gx_bar) ** 2)) for g in grads) / problem.n_nodes
    zy = sum(float(np.sum((g[1] - gy_bar) ** 2)) for g in grads) / problem.n_nodes
    return zx, zy


def gradient_dissimilarity(problem, probe_points) -> tuple[float, float]:
    """Probe-set maximum of the mean squared per-node gradient deviation; a lower bound on the supremum."""
    if len(probe_points) == 0:
        raise ValueError("need at least one probe point")
    vals = [_dissimilarity_at(problem, np.asarray(x, float), np.asarray(y, float)) for x, y in probe_points]
    return max(v[0] for v in vals), max(v[1] for v in vals)


def heterogeneity_report(problem, probe_points) -> HeterogeneityReport:
    try:
        dx, dy = heterogeneity_at_optimum(problem)
    except MissingOracleError:
        dx = dy = float("nan")
    zx, zy = gradient_dissimilarity(problem, probe_points)
    return HeterogeneityReport(dx, dy, zx, zy, len(probe_points))


def moreau_grad_estimate(problem, x, L: float, inner_iters: int = 500) -> MoreauEstimate:
    """Gradient of the 1/(2L)-Moreau envelope of Phi via its proximal point.

    Minimizes Phi(x') + L |x' - x|^2 by gradient descent with step 1/(4L)
    from x' = x; the envelope gradient is then 2L (x - x_hat).
    """
    if inner_iters < 1:
        raise ValueError("inner_iters must be >= 1")
    if not L > 0:
        raise ValueError("L must be positive")
    x = np.asarray(x, dtype=np.float64)
    xp = x.copy()
    step = 1.0 / (4.0 * L)
    for _ in range(inner_iters):
        _, g = problem.envelope(xp)
        xp = xp - step * (g + 2.0 * L * (xp - x))
    _, g = problem.envelope(xp)
    residual = float(np.linalg.norm(g + 2.0 * L * (xp - x)))
    gm = 2.0 * L * (x - xp)
    return MoreauEstimate(prox_point=xp, grad_norm_sq=float(gm @ gm), inner_solver_residual=residual)


def moreau_objective(problem, x, xp, L: float) -> float:
    d = np.asarray(xp) - np.asarray(x)
    return problem.envelope(xp)[0] + L * float(d @ d)


# hook factories used by the runner ---------------------------------------

def dist_to_saddle_hook(problem):
    x_star, y_star = problem.saddle_point()

    def hook(view):
        dx = view.x_bar - x_star
        dy = view.y_bar - y_star
        return {"dist_to_saddle": float(dx @ dx + dy @ dy)}

    return hook


def envelope_grad_hook(problem):
    def hook(view):
        _, g = problem.envelope(view.x_bar)
        return {"envelope_grad_norm": float(g @ g)}

    return hook


def objective_hook(problem):
    def hook(view):
        return {"objective": problem.global_value(view.x_bar, view.y_bar)}

    return hook


def robust_loss_hook(problem, inner_steps=100, inner_lr=0.01, radius=1.0, sync_only=True):
    def hook(view):
        if sync_only and not view.at_sync:
            return None
        loss, delta = robust_loss(problem, view.x_bar, inner_steps, inner_lr, radius, return_delta=True)
        out = {"robust_loss": loss}
        if hasattr(problem, "eval_accuracy"):
            out["robust_accuracy"] = problem.eval_accuracy(view.x_bar, delta)
        return out

    return hook
