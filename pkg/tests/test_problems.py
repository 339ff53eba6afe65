import json
import math

import numpy as np
import pytest
from scipy import integrate, stats

from mcls.estimators import grad_usample_arrays
from mcls.problems import (
    P1_PUBLISHED_X_STAR, LinearGaussianProblem, Problem1, Problem2, make_problem,
    problem1_kernel_fixed_g, problem1_moments, problem1_reference,
    problem1_reference_recompute, ramp,
)
from mcls.rng import RunRng


def _fixed_g_pair(x, g):
    q = np.empty(3)
    j = np.empty((3, 2))
    problem1_kernel_fixed_g(np.array([g]), np.asarray(x, float), RunRng.from_seed(1).state,
                            np.zeros(2), q, j)
    return q, j


def _quad_moments(x):
    """Independent oracle: numerical integration over G."""
    def row(i, a, b, t):
        f = lambda g: (min(max(a * (x[0] + x[1] * g) - b, 0), 1) - t) * stats.norm.pdf(g)
        lo, hi = (b / a - x[0]) / x[1], ((b + 1) / a - x[0]) / x[1]
        pts = sorted([lo, hi])
        q = sum(integrate.quad(f, s, e, epsabs=1e-13)[0]
                for s, e in [(-12, pts[0]), (pts[0], pts[1]), (pts[1], 12)])
        j0 = a * (stats.norm.cdf(hi) - stats.norm.cdf(lo))
        j1 = a * integrate.quad(lambda g: g * stats.norm.pdf(g), lo, hi, epsabs=1e-13)[0]
        return q, (j0, j1)
    rows = [row(i, a, b, t) for i, (a, b, t) in enumerate([(1, 0, .5), (1, 1, .5), (2, 1, .2)])]
    return np.array([r[0] for r in rows]), np.array([r[1] for r in rows])


def test_ramp_is_clamp():
    y = np.linspace(-3, 4, 10_000)
    np.testing.assert_allclose(ramp(y), np.clip(y, 0, 1), atol=1e-15)
    assert ramp(-1.0) == 0 and ramp(0.5) == 0.5 and ramp(2.0) == 1


def test_problem1_hand_example():
    q, j = _fixed_g_pair([0.6, 2.0], 0.0)
    np.testing.assert_allclose(q, [0.1, -0.5, 0.0], atol=1e-15)
    np.testing.assert_array_equal(j[:, 0], [1, 0, 2])
    np.testing.assert_array_equal(j[:, 1], [0, 0, 0])


def test_problem1_kink_slope_half():
    # y = 1 exactly: all three arguments (1, 0, 1) sit on kinks.
    _, j = _fixed_g_pair([1.0, 2.0], 0.0)
    np.testing.assert_array_equal(j[:, 0], [0.5, 0.5, 1.0])


@pytest.mark.parametrize("x", [P1_PUBLISHED_X_STAR, np.array([1.3, 1.7]), np.array([0.2, 2.9])])
def test_problem1_moments_match_quadrature(x):
    qq, jq = _quad_moments(x)
    qm, jm = problem1_moments(x)
    np.testing.assert_allclose(qm, qq, atol=1e-9)
    np.testing.assert_allclose(jm, jq, atol=1e-9)


def test_problem1_sample_means_unbiased():
    p = Problem1()
    x = np.array([0.9, 1.6])
    qs, js = p.sample_many(x, 100_000, RunRng.from_seed(7))
    qbar, jbar = problem1_moments(x)
    se_q = qs.std(axis=0, ddof=1) / math.sqrt(len(qs))
    se_j = js.std(axis=0, ddof=1) / math.sqrt(len(js))
    assert np.all(np.abs(qs.mean(axis=0) - qbar) < 5 * se_q)
    assert np.all(np.abs(js.mean(axis=0) - jbar) <= 5 * se_j + 1e-15)


@pytest.mark.xfail(strict=True, reason="the published Problem 1 point is not stationary for "
                   "the stated residuals; the exact gradient there is about (0.031, -0.007)")
def test_problem1_gradient_vanishes_at_reference():
    p = Problem1()
    qs, js = p.sample_many(P1_PUBLISHED_X_STAR, 1_000_000, RunRng.from_seed(11))
    grads = np.array([grad_usample_arrays(qs[i:i + 100], js[i:i + 100])
                      for i in range(0, len(qs), 100)])
    se = grads.std(axis=0, ddof=1) / math.sqrt(len(grads))
    assert np.all(np.abs(grads.mean(axis=0)) < 5 * se)


def test_problem1_constants():
    p = Problem1()
    assert (p.dim_m, p.dim_n) == (3, 2)
    np.testing.assert_array_equal(p.box.lower, [0, 1])
    np.testing.assert_array_equal(p.box.upper, [2, 3])
    np.testing.assert_array_equal(p.initial_point(RunRng.from_seed(1)), [2.0, 1.0])
    ref = problem1_reference()
    np.testing.assert_array_equal(ref.x_star, P1_PUBLISHED_X_STAR)
    assert np.all(np.linalg.eigvalsh(ref.precond) > 0)
    np.testing.assert_allclose(ref.hessian, ref.hessian.T)


def test_problem2_tiny_instance():
    p = Problem2(1, 1)
    np.testing.assert_array_equal(p.a_matrix, [[1.0]])
    np.testing.assert_array_equal(p.y, [1.0])
    np.testing.assert_allclose(p.u_star, [2.0])
    np.testing.assert_allclose(p.box.lower, [math.asinh(1)])
    np.testing.assert_allclose(p.box.upper, [math.asinh(3)])


def test_problem2_matrix_formula():
    p = Problem2(4, 5)
    for i in range(1, 6):
        for j in range(1, 5):
            assert p.a_matrix[i - 1, j - 1] == pytest.approx(math.exp(-0.5 * 20 * (i / 5 - j / 4) ** 2))
    assert np.all((p.a_matrix > 0) & (p.a_matrix <= 1))
    np.testing.assert_array_equal(p.y, [1, 4, 9, 16, 25])


def test_problem2_pairs_share_b():
    p = Problem2(3, 4)
    x = p.reference.x_star + 0.1
    q, j = p.sample(x, RunRng.from_seed(2))
    # Both come from the same diagonal B: Q + y = J diag(tanh x).
    np.testing.assert_allclose(q + p.y, j @ np.tanh(x), rtol=1e-12)


def test_problem2_mean_residual_and_jacobian():
    p = Problem2(4, 5)
    x = 0.5 * (p.box.lower + p.box.upper) + 0.2 * (p.box.upper - p.box.lower)
    qs, js = p.sample_many(x, 1_000_000, RunRng.from_seed(3))
    qbar, jbar = p.expected(x)
    se_q = qs.std(axis=0, ddof=1) / 1000.0
    se_j = js.std(axis=0, ddof=1) / 1000.0
    assert np.all(np.abs(qs.mean(axis=0) - qbar) < 5 * se_q)
    assert np.all(np.abs(js.mean(axis=0) - jbar) < 5 * se_j)


def test_problem2_reference_is_stationary():
    p = Problem2(4, 5)
    x = p.reference.x_star
    qs, js = p.sample_many(x, 1_000_000, RunRng.from_seed(4))
    grads = np.array([grad_usample_arrays(qs[i:i + 100], js[i:i + 100])
                      for i in range(0, len(qs), 100)])
    se = grads.std(axis=0, ddof=1) / math.sqrt(len(grads))
    assert np.all(np.abs(grads.mean(axis=0)) < 5 * se)
    qbar, jbar = p.expected(x)
    np.testing.assert_allclose(jbar.T @ qbar, 0, atol=1e-9)


def test_problem2_jacobian_common_random_numbers():
    p = Problem2(4, 5)
    x = p.reference.x_star + 0.05
    h = 1e-4
    _, jbar = p.expected(x)
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        base = RunRng.from_seed(100 + i)
        qp, _ = p.sample_many(x + e, 2000, base.copy())
        qm, _ = p.sample_many(x - e, 2000, base.copy())
        fd = ((qp - qm) / (2 * h)).mean(axis=0)
        _, js = p.sample_many(x, 2000, base.copy())
        np.testing.assert_allclose(fd, js.mean(axis=0)[:, i], atol=1e-6)
        analytic = 0.5 * p.a_matrix[:, i] * math.cosh(x[i])
        assert np.all(np.abs(js.mean(axis=0)[:, i] - analytic) < 0.05 * np.abs(analytic) + 1e-12)


def test_problem2_pure_and_serializable():
    a, b = Problem2(4, 5, 3), Problem2(4, 5, 3)
    np.testing.assert_array_equal(a.params, b.params)
    doc = json.loads(json.dumps(a.to_json()))
    assert doc["n"] == 4 and len(doc["a_matrix"]) == 5
    assert set(doc["box"]) == {"lower", "upper"}
    with pytest.raises(ValueError):
        Problem2(5, 4)


def test_problem2_initial_point_feasible():
    p = Problem2(4, 5)
    x0 = p.initial_point(RunRng.from_seed(9))
    assert p.box.contains(x0)


def test_linear_gaussian_noiseless():
    jm = np.array([[1.0, 2.0], [0.0, 1.0], [3.0, -1.0]])
    p = LinearGaussianProblem(jm, [0.5, -0.5])
    x = np.array([1.0, 2.0])
    q, j = p.sample(x, RunRng.from_seed(1))
    np.testing.assert_allclose(q, jm @ (x - [0.5, -0.5]), atol=1e-15)
    np.testing.assert_array_equal(j, jm)


def test_linear_gaussian_noise_covariance():
    jm = np.eye(3)[:, :2]
    cov = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.3], [0.0, 0.3, 0.5]])
    p = LinearGaussianProblem(jm, [0.0, 0.0], cov)
    qs, js = p.sample_many(np.zeros(2), 100_000, RunRng.from_seed(5))
    assert np.all(np.abs(qs.mean(axis=0)) < 5 * qs.std(axis=0) / math.sqrt(1e5))
    emp = np.cov(qs, rowvar=False)
    assert np.linalg.norm(emp - cov) < 0.05 * np.linalg.norm(cov)
    np.testing.assert_array_equal(js[17], jm)


def test_linear_gaussian_semidefinite_noise():
    cov = np.array([[1.0, 1.0], [1.0, 1.0]])
    p = LinearGaussianProblem(np.eye(2), [0.0, 0.0], cov)
    qs, _ = p.sample_many(np.zeros(2), 50_000, RunRng.from_seed(6))
    np.testing.assert_allclose(qs[:, 0], qs[:, 1], atol=1e-12)


def test_make_problem():
    assert make_problem({"name": "problem1"}).dim_n == 2
    assert make_problem({"name": "problem2", "n": 4, "m": 5}).dim_m == 5
    lg = make_problem({"name": "linear_gaussian", "j_matrix": [[1.0]], "x_star": [0.0]})
    assert lg.dim_n == 1
    with pytest.raises(ValueError):
        make_problem({"name": "nope"})


def test_reference_recompute_validation():
    with pytest.raises(ValueError):
        problem1_reference_recompute(10)
    x, cov = problem1_reference_recompute(1000, RunRng.from_seed(1), instances=2)
    assert x.shape == (2,) and cov.shape == (2, 2)
    assert Problem1().box.contains(x)
