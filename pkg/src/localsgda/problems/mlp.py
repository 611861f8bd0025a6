"""Two-hidden-layer ReLU network trained against a shared input perturbation."""

from __future__ import annotations

import numpy as np

from localsgda.core import DimensionError, ProblemConstants, make_rng
from localsgda.problems.base import MinimaxProblem, project_ball


class RobustMlp(MinimaxProblem):
    """min over weights, max over |delta| <= radius, of mean cross-entropy on inputs a + delta.

    The primal vector is the flat concatenation W1 (d,h), b1 (h), W2 (h,h),
    b2 (h), W3 (h,c), b3 (c) in row-major order. ReLU'(0) is taken as 0.
    """

    has_dual_projection = True

    def __init__(self, features, labels, n_classes: int, hidden: int = 200, radius: float = 1.0,
                 eval_data=None, L: float = 1.0):
        if len(features) != len(labels) or len(features) == 0:
            raise ValueError("need one label vector per node")
        self.features = [np.ascontiguousarray(a, dtype=np.float64) for a in features]
        self.labels = [np.ascontiguousarray(l, dtype=np.int64) for l in labels]
        d = self.features[0].shape[1]
        for a, l in zip(self.features, self.labels):
            if a.ndim != 2 or a.shape[1] != d or l.shape != (a.shape[0],) or len(l) == 0:
                raise ValueError("each node needs an (m_i, d) feature matrix and m_i >= 1 labels")
            if l.min() < 0 or l.max() >= n_classes:
                raise ValueError("labels must lie in [0, n_classes)")
        self.n_nodes = len(self.features)
        self.d_in, self.hidden, self.n_classes = d, int(hidden), int(n_classes)
        self.radius = float(radius)
        h, c = self.hidden, self.n_classes
        self.shapes = [(d, h), (h,), (h, h), (h,), (h, c), (c,)]
        self.fan_in = [d, d, h, h, h, h]
        sizes = [int(np.prod(s)) for s in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.d_x, self.d_y = int(self.offsets[-1]), d
        if eval_data is None:
            eval_data = (np.concatenate(self.features), np.concatenate(self.labels))
        self.eval_features = np.ascontiguousarray(eval_data[0], dtype=np.float64)
        self.eval_labels = np.ascontiguousarray(eval_data[1], dtype=np.int64)
        # no closed-form smoothness for a ReLU network; L is a user-supplied scale
        self.constants = ProblemConstants(L=float(L))

    @classmethod
    def from_dataset(cls, ds, hidden=200, radius=1.0) -> RobustMlp:
        n_classes = int(max(int(l.max()) for l in ds.targets) + 1)
        eval_data = None
        if ds.test_features is not None and len(ds.test_features):
            eval_data = (ds.test_features, ds.test_targets)
            n_classes = max(n_classes, int(ds.test_targets.max()) + 1)
        return cls(ds.features, [t.astype(np.int64) for t in ds.targets], n_classes, hidden, radius, eval_data)

    def unpack(self, w: np.ndarray) -> list[np.ndarray]:
        if w.shape != (self.d_x,):
            raise DimensionError(f"weight vector must have length {self.d_x}")
        return [w[self.offsets[k]: self.offsets[k + 1]].reshape(s) for k, s in enumerate(self.shapes)]

    def init_weights(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
        parts = [rng.uniform(-1.0, 1.0, int(np.prod(s))) / np.sqrt(f) for s, f in zip(self.shapes, self.fan_in)]
        return np.concatenate(parts)

    def project_dual(self, y):
        return project_ball(y, self.radius)

    # forward / backward ----------------------------------------------------

    def _forward(self, w, a):
        W1, b1, W2, b2, W3, b3 = self.unpack(w)
        z1 = a @ W1 + b1
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ W2 + b2
        h2 = np.maximum(z2, 0.0)
        logits = h2 @ W3 + b3
        return z1, h1, z2, h2, logits

    @staticmethod
    def _log_softmax(logits):
        m = logits.max(axis=1, keepdims=True)
        s = logits - m
        return s - np.log(np.exp(s).sum(axis=1, keepdims=True))

    def _loss_and_grads(self, w, delta, a, labels, need_grad=True):
        if delta.shape != (self.d_in,):
            raise DimensionError(f"delta must have length {self.d_in}")
        inp = a + delta
        z1, h1, z2, h2, logits = self._forward(w, inp)
        logp = self._log_softmax(logits)
        m = len(labels)
        rows = np.arange(m)
        loss = float(-logp[rows, labels].sum() / m)
        if not need_grad:
            return loss, None, None
        W1, _, W2, _, W3, _ = self.unpack(w)
        dlogits = np.exp(logp)
        dlogits[rows, labels] -= 1.0
        dlogits /= m
        dW3 = h2.T @ dlogits
        db3 = dlogits.sum(0)
        dz2 = (dlogits @ W3.T) * (z2 > 0)
        dW2 = h1.T @ dz2
        db2 = dz2.sum(0)
        dz1 = (dz2 @ W2.T) * (z1 > 0)
        dW1 = inp.T @ dz1
        db1 = dz1.sum(0)
        g_delta = (dz1 @ W1.T).sum(0)
        g_w = np.concatenate([g.ravel() for g in (dW1, db1, dW2, db2, dW3, db3)])
        return loss, g_w, g_delta

    def activation_pattern(self, node, x, y) -> np.ndarray:
        z1, _, z2, _, _ = self._forward(x, self.features[node] + y)
        return np.concatenate([(z1 > 0).ravel(), (z2 > 0).ravel()])

    # oracle interface ------------------------------------------------------

    def sample(self, node, batch_size, rng):
        self.check_node(node)
        return rng.integers(0, len(self.labels[node]), size=batch_size)

    def batch_grad(self, node, x, y, batch):
        self.check_node(node)
        self.check_dims(x, y)
        batch = np.asarray(batch)
        if batch.size == 0:
            raise ValueError("empty batch")
        _, gw, gd = self._loss_and_grads(x, y, self.features[node][batch], self.labels[node][batch])
        return gw, gd

    def full_grad(self, node, x, y):
        self.check_node(node)
        self.check_dims(x, y)
        _, gw, gd = self._loss_and_grads(x, y, self.features[node], self.labels[node])
        return gw, gd

    def full_value(self, node, x, y):
        self.check_node(node)
        self.check_dims(x, y)
        return self._loss_and_grads(x, y, self.features[node], self.labels[node], need_grad=False)[0]

    def eval_value(self, x, y):
        return self._loss_and_grads(x, y, self.eval_features, self.eval_labels, need_grad=False)[0]

    def eval_dual_grad(self, x, y):
        return self._loss_and_grads(x, y, self.eval_features, self.eval_labels)[2]

    def eval_accuracy(self, x, y) -> float:
        logits = self._forward(x, self.eval_features + y)[4]
        return float(np.mean(logits.argmax(1) == self.eval_labels))


def mlp_grad(prob: RobustMlp, node: int, weights, delta, batch):
    return prob.batch_grad(node, np.asarray(weights, dtype=np.float64), np.asarray(delta, dtype=np.float64), batch)


def random_mlp_problem(n_nodes=2, d=5, hidden=4, n_classes=3, samples_per_node=8, seed=0) -> RobustMlp:
    """Small random classification instance, handy for gradient checks."""
    rng = make_rng(seed)
    feats = [rng.standard_normal((samples_per_node, d)) for _ in range(n_nodes)]
    labels = [rng.integers(0, n_classes, samples_per_node) for _ in range(n_nodes)]
    return RobustMlp(feats, labels, n_classes=n_classes, hidden=hidden)
