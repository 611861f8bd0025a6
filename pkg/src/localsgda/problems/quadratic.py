from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg

from localsgda.core import ProblemConstants, as_vec, make_rng
from localsgda.problems.base import GaussianNoiseMixin, MinimaxProblem


class SingularSystemError(np.linalg.LinAlgError):
    pass


class QuadraticSaddle(GaussianNoiseMixin, MinimaxProblem):
    """f_i(x, y) = 1/2 x'A_i x + x'B_i y - 1/2 y'C_i y + p_i'x + q_i'y.

    Stochastic gradients add Gaussian noise of standard deviation ``sigma_g``
    per coordinate.
    """

    def __init__(self, A, B, C, p, q, sigma_g: float = 0.0):
        self.A = np.asarray(A, dtype=np.float64)
        self.B = np.asarray(B, dtype=np.float64)
        self.C = np.asarray(C, dtype=np.float64)
        self.p = np.asarray(p, dtype=np.float64)
        self.q = np.asarray(q, dtype=np.float64)
        n, d_x, d_y = self.B.shape
        if self.A.shape != (n, d_x, d_x) or self.C.shape != (n, d_y, d_y):
            raise ValueError("A must be (n, d_x, d_x) and C (n, d_y, d_y)")
        if self.p.shape != (n, d_x) or self.q.shape != (n, d_y):
            raise ValueError("p must be (n, d_x) and q (n, d_y)")
        if not (np.allclose(self.A, self.A.transpose(0, 2, 1)) and np.allclose(self.C, self.C.transpose(0, 2, 1))):
            raise ValueError("A_i and C_i must be symmetric")
        self.n_nodes, self.d_x, self.d_y = n, d_x, d_y
        self.sigma_g = float(sigma_g)

        mu = min(min(np.linalg.eigvalsh(self.A[i])[0], np.linalg.eigvalsh(self.C[i])[0]) for i in range(n))
        if mu <= 0:
            raise ValueError("A_i and C_i must be positive definite")
        L = max(np.linalg.norm(self._hessian(i), 2) for i in range(n))
        self.constants = ProblemConstants(
            L=float(L), mu=float(mu), sigma2=self.sigma_g**2 * max(d_x, d_y)
        )

    def _hessian(self, i: int) -> np.ndarray:
        return np.block([[self.A[i], self.B[i]], [self.B[i].T, -self.C[i]]])

    @classmethod
    def random(
        cls,
        n_nodes: int,
        d_x: int,
        d_y: int,
        sigma_g: float = 0.0,
        seed: int = 0,
        eig_range: tuple[float, float] = (1.0, 2.0),
        coupling: float = 0.5,
        heterogeneity: float = 1.0,
    ) -> QuadraticSaddle:
        """Random instance with node eigenvalues of A_i, C_i inside ``eig_range``."""
        rng = make_rng(seed)
        lo, hi = eig_range

        def spd(d):
            Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
            M = (Q * rng.uniform(lo, hi, d)) @ Q.T
            return (M + M.T) / 2

        A = np.stack([spd(d_x) for _ in range(n_nodes)])
        C = np.stack([spd(d_y) for _ in range(n_nodes)])
        B = coupling * rng.standard_normal((n_nodes, d_x, d_y)) / np.sqrt(max(d_x, d_y))
        p = heterogeneity * rng.standard_normal((n_nodes, d_x))
        q = heterogeneity * rng.standard_normal((n_nodes, d_y))
        return cls(A, B, C, p, q, sigma_g=sigma_g)

    def full_grad(self, node, x, y):
        self.check_node(node)
        self.check_dims(x, y)
        gx = self.A[node] @ x + self.B[node] @ y + self.p[node]
        gy = self.B[node].T @ x - self.C[node] @ y + self.q[node]
        return gx, gy

    def full_value(self, node, x, y):
        self.check_node(node)
        self.check_dims(x, y)
        i = node
        return float(
            0.5 * x @ self.A[i] @ x + x @ self.B[i] @ y - 0.5 * y @ self.C[i] @ y + self.p[i] @ x + self.q[i] @ y
        )

    def saddle_point(self):
        return quadratic_saddle_solve(self)


def quadratic_grad(prob: QuadraticSaddle, node: int, x, y):
    x = as_vec(x, prob.d_x, "x")
    y = as_vec(y, prob.d_y, "y")
    return prob.full_grad(node, x, y)


def quadratic_saddle_solve(prob: QuadraticSaddle) -> tuple[np.ndarray, np.ndarray]:
    """Solve [A B; B' -C] (x*, y*) = (-p, -q) for the node-averaged blocks by LU."""
    A, B, C = prob.A.mean(0), prob.B.mean(0), prob.C.mean(0)
    rhs = -np.concatenate([prob.p.mean(0), prob.q.mean(0)])
    K = np.block([[A, B], [B.T, -C]])
    try:
        with warnings.catch_warnings():
            # singular pivots are detected explicitly below
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu = scipy.linalg.lu_factor(K, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystemError(str(exc)) from exc
    if np.any(np.abs(np.diag(lu[0])) <= 1e-14 * max(1.0, np.abs(K).max())):
        raise SingularSystemError("saddle system is singular")
    z = scipy.linalg.lu_solve(lu, rhs)
    if np.linalg.norm(K @ z - rhs) > 1e-8 * (1 + np.linalg.norm(rhs)):
        raise SingularSystemError("saddle system is ill-conditioned; residual too large")
    return z[: prob.d_x], z[prob.d_x:]
