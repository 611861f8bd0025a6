"""Abstract per-node oracle for F(x, y) = (1/n) sum_i f_i(x, y)."""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Any

import numpy as np

from localsgda.core import DimensionError, ProblemConstants, average_vectors


class MissingOracleError(RuntimeError):
    """The problem does not expose the requested closed-form oracle."""


class MinimaxProblem(ABC):
    """Finite-sum minimax problem split across ``n_nodes`` nodes.

    Subclasses implement ``sample`` and ``batch_grad``; a stochastic gradient is
    ``batch_grad`` evaluated on a fresh ``sample``. Keeping the sample explicit
    lets Local SGDA+ evaluate the primal and dual gradients on the same
    minibatch at different points.

    Dual oracles return the gradient of f_i itself; the algorithms ascend
    along it.
    """

    n_nodes: int
    d_x: int
    d_y: int
    constants: ProblemConstants

    @abstractmethod
    def sample(self, node: int, batch_size: int, rng: np.random.Generator) -> Any:
        """Draw the randomness of one stochastic gradient."""

    @abstractmethod
    def batch_grad(self, node: int, x: np.ndarray, y: np.ndarray, batch: Any) -> tuple[np.ndarray, np.ndarray]:
        """Gradient of node ``node`` at (x, y) on a drawn sample."""

    @abstractmethod
    def full_grad(self, node: int, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ...

    @abstractmethod
    def full_value(self, node: int, x: np.ndarray, y: np.ndarray) -> float:
        ...

    def stochastic_grad(self, node, x, y, batch_size, rng):
        return self.batch_grad(node, x, y, self.sample(node, batch_size, rng))

    def check_dims(self, x: np.ndarray, y: np.ndarray) -> None:
        if x.shape != (self.d_x,) or y.shape != (self.d_y,):
            raise DimensionError(
                f"expected x in R^{self.d_x}, y in R^{self.d_y}; got {x.shape}, {y.shape}"
            )

    def check_node(self, node: int) -> None:
        if not 0 <= node < self.n_nodes:
            raise IndexError(f"node {node} out of range [0, {self.n_nodes})")

    # Optional capabilities -------------------------------------------------

    has_dual_projection = False

    def project_dual(self, y: np.ndarray) -> np.ndarray:
        return y

    def saddle_point(self) -> tuple[np.ndarray, np.ndarray]:
        raise MissingOracleError(f"{type(self).__name__} has no saddle-point oracle")

    def envelope(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        """Return Phi(x) = max_y F(x, y) and its gradient."""
        raise MissingOracleError(f"{type(self).__name__} has no envelope oracle")

    # Global averages -------------------------------------------------------

    def global_grad(self, x, y):
        gs = [self.full_grad(i, x, y) for i in range(self.n_nodes)]
        return average_vectors([g[0] for g in gs]), average_vectors([g[1] for g in gs])

    def global_value(self, x, y) -> float:
        return sum(self.full_value(i, x, y) for i in range(self.n_nodes)) / self.n_nodes


def project_ball(v: np.ndarray, r: float) -> np.ndarray:
    """Euclidean projection onto the closed ball of radius ``r`` centred at 0."""
    if not r > 0:
        raise ValueError("radius must be positive")
    norm = float(np.linalg.norm(v))
    if norm <= r:
        return v
    out = v * (r / norm)
    # rounding can leave the rescaled vector a hair outside
    n2 = float(np.linalg.norm(out))
    if n2 > r:
        out = out * (r / n2)
    return out


class GaussianNoiseMixin:
    """Stochastic gradients as full gradient plus i.i.d. N(0, sigma_g^2 / batch) noise."""

    sigma_g: float

    def sample(self, node, batch_size, rng):
        return rng.standard_normal(self.d_x + self.d_y) * (self.sigma_g / np.sqrt(batch_size))

    def batch_grad(self, node, x, y, batch):
        gx, gy = self.full_grad(node, x, y)
        return gx + batch[: self.d_x], gy + batch[self.d_x:]
