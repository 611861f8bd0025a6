from __future__ import annotations

import numpy as np


def _rel_err(fd: np.ndarray, g: np.ndarray) -> np.ndarray:
    # relative where gradients are O(1) or larger, absolute below that
    return np.abs(fd - g) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1.0)


def finite_diff_check(problem, node: int, x, y, step: float = 1e-5) -> tuple[float, float]:
    """Worst coordinatewise relative error of ``full_grad`` against central differences of ``full_value``.

    Problems exposing ``activation_pattern`` (piecewise-smooth networks) have
    coordinates skipped whenever the +-step probes change the activation
    pattern, i.e. the difference quotient straddles a kink.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    y = np.array(y, dtype=np.float64)
    gx, gy = problem.full_grad(node, x, y)
    pattern = getattr(problem, "activation_pattern", None)
    base = pattern(node, x, y) if pattern is not None else None

    def fd_block(v):
        out = np.full(v.shape, np.nan)
        for k in range(v.size):
            vals = []
            ok = True
            for sgn in (1.0, -1.0):
                old = v[k]
                v[k] = old + sgn * step
                if base is not None and not np.array_equal(pattern(node, x, y), base):
                    ok = False
                vals.append(problem.full_value(node, x, y))
                v[k] = old
            if ok:
                out[k] = (vals[0] - vals[1]) / (2 * step)
        return out

    fx = fd_block(x)
    fy = fd_block(y)

    def worst(fd, g):
        mask = ~np.isnan(fd)
        return float(_rel_err(fd[mask], g[mask]).max()) if mask.any() else 0.0

    return worst(fx, gx), worst(fy, gy)
