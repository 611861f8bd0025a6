import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from localsgda.core import DimensionError, make_rng
from localsgda.problems import (
    Ball,
    MissingOracleError,
    NcplToy,
    NcscToy,
    Penalty,
    QuadraticSaddle,
    RobustLinReg,
    RobustMlp,
    SingularSystemError,
    finite_diff_check,
    mlp_grad,
    ncsc_envelope,
    project_ball,
    quadratic_grad,
    quadratic_saddle_solve,
    random_mlp_problem,
    robust_linreg_grad,
)


def eye_quadratic(n=1, d=2):
    I = np.stack([np.eye(d)] * n)
    return QuadraticSaddle(I, np.zeros((n, d, d)), I, np.zeros((n, d)), np.zeros((n, d)))


def central_diff(f, v, step=1e-5):
    v = np.array(v, dtype=np.float64)
    out = np.empty_like(v)
    for k in range(v.size):
        e = np.zeros_like(v)
        e[k] = step
        out[k] = (f(v + e) - f(v - e)) / (2 * step)
    return out


def small_linreg(dual, seed=0, n=2, m=7, d=3):
    rng = make_rng(seed)
    return RobustLinReg([rng.standard_normal((m, d)) for _ in range(n)],
                        [rng.standard_normal(m) for _ in range(n)], lam_x=0.5, dual=dual)


# --------------------------------------------------------------------------
# QuadraticSaddle
# --------------------------------------------------------------------------

def test_quadratic_grad_identity_example():
    prob = eye_quadratic()
    gx, gy = quadratic_grad(prob, 0, np.array([1.0, 0.0]), np.array([0.0, 2.0]))
    assert gx.tolist() == [1.0, 0.0]
    assert gy.tolist() == [0.0, -2.0]


def test_quadratic_grad_dimension_error():
    with pytest.raises(DimensionError):
        quadratic_grad(eye_quadratic(), 0, np.zeros(3), np.zeros(2))


def test_quadratic_gradient_matches_finite_differences():
    prob = QuadraticSaddle.random(3, 4, 4, seed=5)
    rng = make_rng(1)
    for node in range(3):
        x, y = rng.standard_normal(4), rng.standard_normal(4)
        gx, gy = prob.full_grad(node, x, y)
        fx = central_diff(lambda v: prob.full_value(node, v, y), x)
        fy = central_diff(lambda v: prob.full_value(node, x, v), y)
        assert np.max(np.abs(fx - gx) / np.maximum(np.abs(gx), 1)) <= 1e-6
        assert np.max(np.abs(fy - gy) / np.maximum(np.abs(gy), 1)) <= 1e-6


def test_saddle_solve_decoupled():
    rng = make_rng(3)
    n, d = 3, 3
    A = np.stack([np.eye(d) * (1 + i) for i in range(n)])
    C = np.stack([np.eye(d) * (2 + i) for i in range(n)])
    p, q = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    prob = QuadraticSaddle(A, np.zeros((n, d, d)), C, p, q)
    x, y = quadratic_saddle_solve(prob)
    np.testing.assert_allclose(x, -np.linalg.solve(A.mean(0), p.mean(0)), atol=1e-14)
    np.testing.assert_allclose(y, np.linalg.solve(C.mean(0), q.mean(0)), atol=1e-14)


def test_saddle_solve_trivial_is_zero():
    x, y = quadratic_saddle_solve(eye_quadratic(2, 3))
    assert np.all(x == 0) and np.all(y == 0)


@pytest.mark.parametrize("seed", range(5))
def test_saddle_certificate(seed):
    prob = QuadraticSaddle.random(4, 3, 3, seed=seed)
    x, y = quadratic_saddle_solve(prob)
    gx, gy = prob.global_grad(x, y)
    assert np.linalg.norm(gx) + np.linalg.norm(gy) <= 1e-8
    for i in range(4):
        # the per-node gradients at the saddle are generally nonzero but average out
        assert np.all(np.isfinite(quadratic_grad(prob, i, x, y)[0]))


def test_saddle_point_is_minimax():
    prob = QuadraticSaddle.random(2, 3, 2, seed=9)
    x, y = prob.saddle_point()
    rng = make_rng(4)
    F = prob.global_value(x, y)
    for _ in range(20):
        assert prob.global_value(x, y + 0.1 * rng.standard_normal(2)) <= F + 1e-12
        assert prob.global_value(x + 0.1 * rng.standard_normal(3), y) >= F - 1e-12


def test_saddle_solve_singular_system():
    # C-bar singular, B-bar zero: the optimality system has no unique solution
    n, d = 1, 2
    prob = eye_quadratic(n, d)
    prob.C = np.zeros((1, d, d))
    with pytest.raises(SingularSystemError):
        quadratic_saddle_solve(prob)


def test_quadratic_rejects_indefinite():
    A = np.stack([np.diag([1.0, -1.0])])
    with pytest.raises(ValueError):
        QuadraticSaddle(A, np.zeros((1, 2, 2)), np.stack([np.eye(2)]), np.zeros((1, 2)), np.zeros((1, 2)))


def test_quadratic_constants():
    prob = QuadraticSaddle.random(3, 2, 2, sigma_g=0.5, seed=0, eig_range=(1.0, 3.0))
    assert 1.0 <= prob.constants.mu <= 3.0
    assert prob.constants.L >= prob.constants.mu
    assert prob.constants.sigma2 == pytest.approx(0.25 * 2)


def test_global_grad_is_node_average():
    prob = QuadraticSaddle.random(5, 3, 2, seed=2)
    x, y = np.ones(3), -np.ones(2)
    gx, gy = prob.global_grad(x, y)
    np.testing.assert_allclose(gx, np.mean([prob.full_grad(i, x, y)[0] for i in range(5)], 0), atol=1e-14)
    np.testing.assert_allclose(gy, np.mean([prob.full_grad(i, x, y)[1] for i in range(5)], 0), atol=1e-14)


def test_missing_oracles():
    prob = small_linreg(Ball(1.0))
    with pytest.raises(MissingOracleError):
        prob.saddle_point()
    with pytest.raises(MissingOracleError):
        prob.envelope(np.zeros(3))


# --------------------------------------------------------------------------
# unbiasedness of stochastic gradients
# --------------------------------------------------------------------------

def _unbiased(prob, node, x, y, batch_size=1, draws=10_000):
    rng = make_rng(2024)
    samples = np.array([np.concatenate(prob.stochastic_grad(node, x, y, batch_size, rng)) for _ in range(draws)])
    full = np.concatenate(prob.full_grad(node, x, y))
    sd = samples.std(axis=0, ddof=1)
    return np.all(np.abs(samples.mean(0) - full) <= 3 * sd / math.sqrt(draws) + 1e-12)


@pytest.mark.parametrize("prob", [
    QuadraticSaddle.random(2, 3, 2, sigma_g=0.7, seed=1),
    NcscToy.random(2, 3, 2, sigma_g=0.7, seed=1),
    NcplToy.random(2, 2, 4, sigma_g=0.7, seed=1),
], ids=["quadratic", "ncsc", "ncpl"])
def test_gaussian_noise_unbiased(prob):
    rng = make_rng(0)
    assert _unbiased(prob, 1, rng.standard_normal(prob.d_x), rng.standard_normal(prob.d_y))


@pytest.mark.parametrize("dual", [Ball(1.0), Penalty(1.5)], ids=["ball", "penalty"])
def test_linreg_minibatch_unbiased(dual):
    prob = small_linreg(dual)
    assert _unbiased(prob, 0, np.array([0.3, -0.2, 1.0]), np.array([0.1, 0.2, -0.1]), batch_size=2)


def test_mlp_minibatch_unbiased():
    prob = random_mlp_problem(seed=3)
    w = prob.init_weights(make_rng(0))
    assert _unbiased(prob, 0, w, 0.1 * np.ones(prob.d_y), batch_size=3, draws=4000)


def test_noise_variance_scales_with_batch():
    prob = QuadraticSaddle.random(1, 2, 2, sigma_g=2.0, seed=0)
    rng = make_rng(5)
    noise = np.array([prob.sample(0, 16, rng) for _ in range(20_000)])
    assert noise.var() == pytest.approx(4.0 / 16, rel=0.03)


# --------------------------------------------------------------------------
# RobustLinReg
# --------------------------------------------------------------------------

def test_linreg_grad_at_origin():
    rng = make_rng(0)
    a, b = rng.standard_normal((5, 3)), rng.standard_normal(5)
    prob = RobustLinReg([a], [b], lam_x=0.0, dual=Penalty(0.0))
    gw, gd = robust_linreg_grad(prob, 0, np.zeros(3), np.zeros(3), np.arange(5))
    np.testing.assert_allclose(gw, -(2 / 5) * (b @ a), atol=1e-14)
    assert np.all(gd == 0)


def test_linreg_grad_interpolating_point():
    prob = RobustLinReg([np.array([[1.0, 0.0]])], [np.array([1.0])], lam_x=0.0, dual=Penalty(0.0))
    gw, gd = robust_linreg_grad(prob, 0, np.array([1.0, 0.0]), np.zeros(2), [0])
    assert np.all(gw == 0) and np.all(gd == 0)


def test_linreg_empty_batch():
    with pytest.raises(ValueError):
        robust_linreg_grad(small_linreg(Ball(1.0)), 0, np.zeros(3), np.zeros(3), [])


@pytest.mark.parametrize("dual", [Ball(1.0), Penalty(2.0)], ids=["ball", "penalty"])
def test_linreg_finite_differences(dual):
    prob = small_linreg(dual, seed=4)
    rng = make_rng(8)
    for _ in range(5):
        ex, ey = finite_diff_check(prob, 1, rng.standard_normal(3), rng.standard_normal(3))
        assert max(ex, ey) <= 1e-6


def test_linreg_ball_mode_drops_dual_penalty():
    ball, pen = small_linreg(Ball(1.0)), small_linreg(Penalty(3.0))
    w, d = np.ones(3), np.array([0.2, 0.1, 0.0])
    assert ball.full_value(0, w, d) - pen.full_value(0, w, d) == pytest.approx(1.5 * d @ d)
    assert ball.has_dual_projection and not pen.has_dual_projection


def test_linreg_dual_evaluator_matches_direct():
    prob = small_linreg(Penalty(0.7), seed=2)
    w = np.array([0.5, -1.0, 2.0])
    value, grad = prob.dual_evaluator(w)
    for d in (np.zeros(3), np.array([0.3, -0.4, 0.1])):
        assert value(d) == pytest.approx(prob.eval_value(w, d), rel=1e-12)
        np.testing.assert_allclose(grad(d), prob.eval_dual_grad(w, d), rtol=1e-12, atol=1e-12)


# --------------------------------------------------------------------------
# project_ball
# --------------------------------------------------------------------------

def test_project_ball_examples():
    v = np.array([0.3, 0.4])
    assert project_ball(v, 1.0) is v or np.array_equal(project_ball(v, 1.0), v)
    np.testing.assert_allclose(project_ball(np.array([3.0, 4.0]), 1.0), [0.6, 0.8], atol=1e-15)


finite_vecs = arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e3, 1e3))


@settings(max_examples=200)
@given(finite_vecs, st.floats(0.01, 10.0))
def test_project_ball_properties(v, r):
    p = project_ball(v, r)
    assert np.linalg.norm(p) <= max(np.linalg.norm(v), 0.0) + 1e-12
    assert np.linalg.norm(p) <= r
    assert np.array_equal(project_ball(p, r), p)
    if np.linalg.norm(v) <= r:
        assert np.array_equal(p, v)


# --------------------------------------------------------------------------
# NcscToy
# --------------------------------------------------------------------------

def test_ncsc_envelope_decoupled():
    prob = NcscToy.random(3, 4, 2, seed=1)
    prob0 = NcscToy(prob.c, prob.shift, np.zeros_like(prob.B), prob.mu_y)
    x = np.array([0.5, -1.0, 2.0, 0.1])
    phi, g = ncsc_envelope(prob0, x)
    fbar = np.mean([prob0.full_value(i, x, np.zeros(2)) for i in range(3)])
    assert phi == pytest.approx(fbar, rel=1e-14)
    np.testing.assert_allclose(g, prob0.global_grad(x, np.zeros(2))[0], atol=1e-14)


def test_ncsc_envelope_zero():
    prob = NcscToy.random(2, 3, 2, seed=1)
    prob0 = NcscToy(prob.c, np.zeros_like(prob.shift), prob.B, prob.mu_y)
    phi, g = ncsc_envelope(prob0, np.zeros(3))
    assert phi == 0.0 and np.all(g == 0)


def test_ncsc_envelope_gradient_fd():
    prob = NcscToy.random(3, 4, 3, seed=7)
    rng = make_rng(11)
    for _ in range(20):
        x = 2 * rng.standard_normal(4)
        g = ncsc_envelope(prob, x)[1]
        fd = central_diff(lambda v: ncsc_envelope(prob, v)[0], x)
        assert np.max(np.abs(fd - g) / np.maximum(np.abs(g), 1)) <= 1e-6


def test_ncsc_envelope_consistency():
    prob = NcscToy.random(3, 3, 2, seed=2)
    rng = make_rng(3)
    grid = np.linspace(-3, 3, 13)
    for _ in range(5):
        x = rng.standard_normal(3)
        ys = prob.best_response(x)
        top = prob.global_value(x, ys)
        assert top == pytest.approx(ncsc_envelope(prob, x)[0], rel=1e-12)
        for a in grid:
            for b in grid:
                assert prob.global_value(x, np.array([a, b])) <= top + 1e-12


def test_ncsc_is_nonconvex_in_x():
    prob = NcscToy(np.ones((1, 1)), np.zeros((1, 1)), np.zeros((1, 1, 1)), 1.0)
    f = lambda u: prob.full_value(0, np.array([u]), np.zeros(1))  # noqa: E731
    # midpoint convexity fails across the inflection at |x| = 1/sqrt(3)
    assert f(1.0) > 0.5 * (f(0.5) + f(1.5))


# --------------------------------------------------------------------------
# NcplToy
# --------------------------------------------------------------------------

def test_ncpl_pl_certificate():
    prob = NcplToy.random(3, 2, 5, seed=4)
    eig = np.linalg.eigvalsh(prob.MtM)
    assert eig[0] == pytest.approx(0.0, abs=1e-12)  # singular: not strongly concave
    mu = eig[eig > 1e-10].min()
    assert mu == pytest.approx(prob.pl_modulus, rel=1e-10)
    rng = make_rng(6)
    for _ in range(50):
        x, y = 2 * rng.standard_normal(2), 2 * rng.standard_normal(5)
        gy = prob.global_grad(x, y)[1]
        gap = prob.max_value(x) - prob.global_value(x, y)
        assert 0.5 * gy @ gy >= mu * gap - 1e-10


def test_ncpl_envelope_matches_max_value():
    prob = NcplToy.random(2, 3, 5, seed=1)
    rng = make_rng(0)
    for _ in range(10):
        x = rng.standard_normal(3)
        assert prob.envelope(x)[0] == pytest.approx(prob.max_value(x), rel=1e-10, abs=1e-12)
        fd = central_diff(lambda v: prob.envelope(v)[0], x)
        np.testing.assert_allclose(fd, prob.envelope(x)[1], rtol=1e-6, atol=1e-7)


def test_ncpl_finite_differences():
    prob = NcplToy.random(2, 3, 5, seed=2)
    rng = make_rng(9)
    for _ in range(5):
        ex, ey = finite_diff_check(prob, 0, rng.standard_normal(3), rng.standard_normal(5))
        assert max(ex, ey) <= 1e-5


def test_ncpl_rejects_square_m():
    prob = NcplToy.random(1, 2, 4, seed=0)
    with pytest.raises(ValueError):
        NcplToy(prob.c, prob.shift, np.zeros((1, 4, 2)), np.zeros((1, 4)), np.eye(4))


# --------------------------------------------------------------------------
# RobustMlp
# --------------------------------------------------------------------------

def test_mlp_zero_weights_uniform_loss():
    prob = random_mlp_problem(seed=1)
    loss = prob.full_value(0, np.zeros(prob.d_x), np.zeros(prob.d_y))
    assert loss == math.log(3)


def test_mlp_gradient_finite_differences():
    prob = random_mlp_problem(n_nodes=2, d=5, hidden=4, n_classes=3, samples_per_node=8, seed=2)
    rng = make_rng(4)
    for _ in range(10):
        w = prob.init_weights(rng) + 0.1 * rng.standard_normal(prob.d_x)
        ex, ey = finite_diff_check(prob, 1, w, 0.3 * rng.standard_normal(5))
        assert max(ex, ey) <= 1e-4


def test_mlp_duplicate_batch_invariance():
    prob = random_mlp_problem(seed=5)
    w = prob.init_weights(make_rng(1))
    d = 0.2 * np.ones(5)
    batch = np.array([0, 3, 5])
    g1 = mlp_grad(prob, 0, w, d, batch)
    g2 = mlp_grad(prob, 0, w, d, np.repeat(batch, 2))
    np.testing.assert_allclose(g1[0], g2[0], rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(g1[1], g2[1], rtol=1e-13, atol=1e-15)


def test_mlp_dimension_error():
    prob = random_mlp_problem()
    with pytest.raises(DimensionError):
        mlp_grad(prob, 0, np.zeros(prob.d_x), np.zeros(4), [0])


def test_mlp_layout_and_init():
    prob = RobustMlp([np.zeros((2, 4))], [np.array([0, 1])], n_classes=2, hidden=3)
    assert prob.d_x == 4 * 3 + 3 + 3 * 3 + 3 + 3 * 2 + 2
    w = prob.init_weights(make_rng(0))
    W1 = prob.unpack(w)[0]
    assert W1.shape == (4, 3) and np.all(np.abs(W1) <= 0.5)


def test_finite_diff_check_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_check(eye_quadratic(), 0, np.zeros(2), np.zeros(2), step=0.0)


def test_finite_diff_check_detects_wrong_gradient():
    class Broken(QuadraticSaddle):
        def full_grad(self, node, x, y):
            gx, gy = super().full_grad(node, x, y)
            return 1.01 * gx, gy

    base = QuadraticSaddle.random(1, 2, 2, seed=0)
    prob = Broken(base.A, base.B, base.C, base.p, base.q)
    ex, ey = finite_diff_check(prob, 0, np.ones(2), np.ones(2))
    assert ex > 1e-3 and ey <= 1e-6
