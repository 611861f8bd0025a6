from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from localsgda.core import ProblemConstants
from localsgda.problems.base import MinimaxProblem, project_ball


@dataclass(frozen=True)
class Penalty:
    lam_y: float


@dataclass(frozen=True)
class Ball:
    radius: float = 1.0


class RobustLinReg(MinimaxProblem):
    """Adversarially robust least squares with a perturbation shared by all samples.

    Node i's value is ``mean_j (w'(a_j + delta) - b_j)^2 + lam_x/2 |w|^2``,
    minus ``lam_y/2 |delta|^2`` in penalty mode. In ball mode delta is kept in
    ``|delta| <= radius`` by projecting after every dual step.

    ``eval_data`` is the pooled held-out set used for robust-loss reporting;
    it defaults to the pooled training data.
    """

    def __init__(self, features, targets, lam_x: float = 1.0, dual: Penalty | Ball = Ball(1.0), eval_data=None):
        if len(features) != len(targets) or len(features) == 0:
            raise ValueError("need one target vector per node and at least one node")
        self.features = [np.ascontiguousarray(a, dtype=np.float64) for a in features]
        self.targets = [np.ascontiguousarray(b, dtype=np.float64) for b in targets]
        d = self.features[0].shape[1]
        for a, b in zip(self.features, self.targets):
            if a.ndim != 2 or a.shape[1] != d or b.shape != (a.shape[0],) or a.shape[0] == 0:
                raise ValueError("each node needs an (m_i, d) feature matrix with m_i >= 1 targets")
        self.n_nodes, self.d_x, self.d_y = len(self.features), d, d
        self.lam_x = float(lam_x)
        self.dual = dual
        self.has_dual_projection = isinstance(dual, Ball)
        if eval_data is None:
            eval_data = (np.concatenate(self.features), np.concatenate(self.targets))
        self.eval_features = np.ascontiguousarray(eval_data[0], dtype=np.float64)
        self.eval_targets = np.ascontiguousarray(eval_data[1], dtype=np.float64)
        self.constants = self._estimate_constants()

    @classmethod
    def from_dataset(cls, ds, lam_x: float = 1.0, dual: Penalty | Ball = Ball(1.0)) -> RobustLinReg:
        eval_data = (ds.test_features, ds.test_targets) if ds.test_features is not None and len(ds.test_features) else None
        return cls(ds.features, ds.targets, lam_x=lam_x, dual=dual, eval_data=eval_data)

    def _estimate_constants(self) -> ProblemConstants:
        # Hessian in w is 2 E[(a+delta)(a+delta)'] + lam_x I; bound it at delta = 0
        top = max(2 * np.linalg.eigvalsh(a.T @ a / len(a))[-1] for a in self.features)
        lam_y = self.dual.lam_y if isinstance(self.dual, Penalty) else 0.0
        L = max(top + self.lam_x, lam_y, 1e-12)
        mu = min(self.lam_x, lam_y) if isinstance(self.dual, Penalty) else 0.0
        return ProblemConstants(L=float(L), mu=float(min(mu, L)))

    @property
    def lam_y(self) -> float:
        return self.dual.lam_y if isinstance(self.dual, Penalty) else 0.0

    def project_dual(self, y):
        if isinstance(self.dual, Ball):
            return project_ball(y, self.dual.radius)
        return y

    def sample(self, node, batch_size, rng):
        self.check_node(node)
        return rng.integers(0, len(self.targets[node]), size=batch_size)

    def batch_grad(self, node, x, y, batch):
        self.check_node(node)
        self.check_dims(x, y)
        batch = np.asarray(batch)
        if batch.size == 0:
            raise ValueError("empty batch")
        return self._grad(self.features[node][batch], self.targets[node][batch], x, y)

    def _grad(self, a, b, w, delta):
        z = a + delta
        r = z @ w - b
        m = len(b)
        g_w = (2.0 / m) * (z.T @ r) + self.lam_x * w
        g_d = (2.0 / m) * r.sum() * w - self.lam_y * delta
        return g_w, g_d

    def _value(self, a, b, w, delta):
        r = (a + delta) @ w - b
        return float(r @ r / len(b) + 0.5 * self.lam_x * w @ w - 0.5 * self.lam_y * delta @ delta)

    def full_grad(self, node, x, y):
        self.check_node(node)
        self.check_dims(x, y)
        return self._grad(self.features[node], self.targets[node], x, y)

    def full_value(self, node, x, y):
        self.check_node(node)
        self.check_dims(x, y)
        return self._value(self.features[node], self.targets[node], x, y)

    # pooled evaluation set, used by robust_loss
    def eval_value(self, x, y):
        return self._value(self.eval_features, self.eval_targets, x, y)

    def eval_dual_grad(self, x, y):
        return self._grad(self.eval_features, self.eval_targets, x, y)[1]

    def dual_evaluator(self, w):
        """(value(delta), dual_grad(delta)) on the evaluation set for a fixed w, reusing A w."""
        base = self.eval_features @ w - self.eval_targets
        m = len(base)
        ww = float(w @ w)

        def value(delta):
            r = base + float(delta @ w)
            return float(r @ r / m + 0.5 * self.lam_x * ww - 0.5 * self.lam_y * delta @ delta)

        def grad(delta):
            return (2.0 / m) * float(np.sum(base + float(delta @ w))) * w - self.lam_y * delta

        return value, grad


def robust_linreg_grad(prob: RobustLinReg, node: int, w, delta, batch):
    return prob.batch_grad(node, np.asarray(w, dtype=np.float64), np.asarray(delta, dtype=np.float64), batch)
