"""Nonconvex toy problems with exact envelope oracles."""

from __future__ import annotations

import numpy as np

from localsgda.core import ProblemConstants, make_rng
from localsgda.problems.base import GaussianNoiseMixin, MinimaxProblem


def _bump(x, c, shift):
    # sum_k c_k x_k^2 / (1 + x_k^2) + shift'x; bounded, nonconvex for |x_k| > 1/sqrt(3)
    u = x * x
    return float(np.sum(c * u / (1.0 + u)) + shift @ x)


def _bump_grad(x, c, shift):
    return c * 2.0 * x / (1.0 + x * x) ** 2 + shift


class NcscToy(GaussianNoiseMixin, MinimaxProblem):
    """Nonconvex in x, strongly concave in y.

    f_i(x, y) = sum_k c_ik x_k^2/(1+x_k^2) + s_i'x + x'B_i y - mu_y/2 |y|^2, so
    y*(x) = B'x / mu_y with B the node average and the envelope is
    Phi(x) = fbar(x) + |B'x|^2 / (2 mu_y).
    """

    def __init__(self, c, shift, B, mu_y: float, sigma_g: float = 0.0):
        self.c = np.asarray(c, dtype=np.float64)
        self.shift = np.asarray(shift, dtype=np.float64)
        self.B = np.asarray(B, dtype=np.float64)
        if not mu_y > 0:
            raise ValueError("mu_y must be positive")
        self.mu_y = float(mu_y)
        self.n_nodes, self.d_x, self.d_y = self.B.shape
        if self.c.shape != (self.n_nodes, self.d_x) or self.shift.shape != (self.n_nodes, self.d_x):
            raise ValueError("c and shift must be (n, d_x)")
        self.sigma_g = float(sigma_g)
        self.B_bar = self.B.mean(0)
        self.c_bar = self.c.mean(0)
        self.shift_bar = self.shift.mean(0)
        # |d^2/du^2 u^2/(1+u^2)| <= 2
        L = max(2 * np.abs(self.c).max(), self.mu_y) + max(np.linalg.norm(b, 2) for b in self.B)
        self.constants = ProblemConstants(L=float(L), mu=self.mu_y, sigma2=self.sigma_g**2 * max(self.d_x, self.d_y))

    @classmethod
    def random(cls, n_nodes, d_x, d_y, sigma_g=0.0, seed=0, mu_y=1.0, heterogeneity=0.5) -> NcscToy:
        rng = make_rng(seed)
        c = rng.uniform(0.5, 2.0, (n_nodes, d_x))
        shift = heterogeneity * rng.standard_normal((n_nodes, d_x))
        base = rng.standard_normal((d_x, d_y)) / np.sqrt(d_y)
        B = base + 0.3 * heterogeneity * rng.standard_normal((n_nodes, d_x, d_y)) / np.sqrt(d_y)
        return cls(c, shift, B, mu_y, sigma_g)

    def full_grad(self, node, x, y):
        self.check_node(node)
        self.check_dims(x, y)
        gx = _bump_grad(x, self.c[node], self.shift[node]) + self.B[node] @ y
        gy = self.B[node].T @ x - self.mu_y * y
        return gx, gy

    def full_value(self, node, x, y):
        self.check_node(node)
        self.check_dims(x, y)
        return _bump(x, self.c[node], self.shift[node]) + float(x @ self.B[node] @ y) - 0.5 * self.mu_y * float(y @ y)

    def best_response(self, x):
        return self.B_bar.T @ x / self.mu_y

    def envelope(self, x):
        return ncsc_envelope(self, x)


def ncsc_envelope(prob: NcscToy, x) -> tuple[float, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    bx = prob.B_bar.T @ x
    phi = _bump(x, prob.c_bar, prob.shift_bar) + float(bx @ bx) / (2 * prob.mu_y)
    grad = _bump_grad(x, prob.c_bar, prob.shift_bar) + prob.B_bar @ bx / prob.mu_y
    return phi, grad


class NcplToy(GaussianNoiseMixin, MinimaxProblem):
    """Nonconvex in x, PL but not strongly concave in y.

    f_i(x, y) = bump_i(x) + 1/2 |h_i(x)|^2 - 1/2 |M y - h_i(x)|^2 with
    h_i(x) = P_i x + r_i and a wide matrix M (d_r < d_y), which simplifies to
    bump_i(x) - 1/2 |M y|^2 + h_i(x)'M y. With M of full row rank the maximum
    over y is 1/2 |hbar(x)|^2, giving Phi(x) = bumpbar(x) + 1/2 |Pbar x + rbar|^2.
    The PL modulus is the smallest nonzero eigenvalue of M'M.
    """

    def __init__(self, c, shift, P, r, M, sigma_g: float = 0.0):
        self.c = np.asarray(c, dtype=np.float64)
        self.shift = np.asarray(shift, dtype=np.float64)
        self.P = np.asarray(P, dtype=np.float64)
        self.r = np.asarray(r, dtype=np.float64)
        self.M = np.asarray(M, dtype=np.float64)
        self.n_nodes, d_r, self.d_x = self.P.shape
        d_r2, self.d_y = self.M.shape
        if d_r2 != d_r or self.r.shape != (self.n_nodes, d_r):
            raise ValueError("P must be (n, d_r, d_x), r (n, d_r), M (d_r, d_y)")
        if not d_r < self.d_y:
            raise ValueError("M must be wide (d_r < d_y) so that M'M is singular")
        sv = np.linalg.svd(self.M, compute_uv=False)
        if sv[-1] <= 1e-10 * sv[0]:
            raise ValueError("M must have full row rank")
        self.sigma_g = float(sigma_g)
        self.MtM = self.M.T @ self.M
        self.pl_modulus = float(sv[-1] ** 2)
        self.c_bar, self.shift_bar = self.c.mean(0), self.shift.mean(0)
        self.P_bar, self.r_bar = self.P.mean(0), self.r.mean(0)
        L = max(2 * np.abs(self.c).max(), sv[0] ** 2) + max(np.linalg.norm(p, 2) for p in self.P) * sv[0]
        self.constants = ProblemConstants(
            L=float(L), mu=self.pl_modulus, sigma2=self.sigma_g**2 * max(self.d_x, self.d_y)
        )

    @classmethod
    def random(cls, n_nodes, d_x, d_y, d_r=None, sigma_g=0.0, seed=0, heterogeneity=0.5) -> NcplToy:
        if d_r is None:
            d_r = max(d_x, d_y - 2)
        rng = make_rng(seed)
        c = rng.uniform(0.5, 2.0, (n_nodes, d_x))
        shift = heterogeneity * rng.standard_normal((n_nodes, d_x))
        base = rng.standard_normal((d_r, d_x)) / np.sqrt(d_x)
        P = base + 0.3 * heterogeneity * rng.standard_normal((n_nodes, d_r, d_x)) / np.sqrt(d_x)
        r = heterogeneity * rng.standard_normal((n_nodes, d_r))
        M = rng.standard_normal((d_r, d_y)) / np.sqrt(d_y)
        return cls(c, shift, P, r, M, sigma_g)

    def _h(self, node, x):
        return self.P[node] @ x + self.r[node]

    def full_grad(self, node, x, y):
        self.check_node(node)
        self.check_dims(x, y)
        My = self.M @ y
        gx = _bump_grad(x, self.c[node], self.shift[node]) + self.P[node].T @ My
        gy = self.M.T @ (self._h(node, x) - My)
        return gx, gy

    def full_value(self, node, x, y):
        self.check_node(node)
        self.check_dims(x, y)
        My = self.M @ y
        return _bump(x, self.c[node], self.shift[node]) - 0.5 * float(My @ My) + float(self._h(node, x) @ My)

    def max_value(self, x) -> float:
        """max_y F(x, y), attained by the minimum-norm least-squares solution of M y = hbar(x)."""
        hbar = self.P_bar @ x + self.r_bar
        y_star = np.linalg.lstsq(self.M, hbar, rcond=None)[0]
        return self.global_value(x, y_star)

    def envelope(self, x):
        x = np.asarray(x, dtype=np.float64)
        h = self.P_bar @ x + self.r_bar
        phi = _bump(x, self.c_bar, self.shift_bar) + 0.5 * float(h @ h)
        grad = _bump_grad(x, self.c_bar, self.shift_bar) + self.P_bar.T @ h
        return phi, grad
