"""Concrete benchmark problems.

``Problem1``             3 residuals of a clamped Gaussian location/scale model, n = 2.
``Problem2``             ``Q = A B sinh(x) - y`` with random diagonal B, arbitrary (n, m).
``LinearGaussianProblem`` ``Q = J (x - x*) + eps``, optionally noisy Jacobian.
"""
from __future__ import annotations

import math
from typing import Optional

import numba as nb
import numpy as np
from scipy import special

from .core import BoxConstraints, McLsProblem, ReferenceSolution
from .rng import RunRng, normal, rng_for_run, uniform

# ----------------------------------------------------------------- Problem 1

# Row i of Problem 1 is L(a_i * y - b_i) - t_i.
P1_SLOPES = (1.0, 1.0, 2.0)
P1_SHIFTS = (0.0, 1.0, 1.0)
P1_TARGETS = (0.5, 0.5, 0.2)
P1_PUBLISHED_X_STAR = np.array([0.660877, 2.28548])
P1_PUBLISHED_COV_OF_MEAN = np.array([[3.72107e-8, -7.943e-8], [-7.943e-8, 3.12237e-7]])
P1_START = np.array([2.0, 1.0])


def ramp(y):
    """(|y| - |y - 1| + 1) / 2, i.e. y clamped to [0, 1]."""
    return (np.abs(y) - np.abs(y - 1.0) + 1.0) / 2.0


@nb.njit(inline="always", cache=True)
def _clamp01(y):
    return min(max(y, 0.0), 1.0)


@nb.njit(inline="always", cache=True)
def _ramp_slope(y):
    # One-sided derivatives average to 1/2 at the kinks.
    if 0.0 < y < 1.0:
        return 1.0
    if y == 0.0 or y == 1.0:
        return 0.5
    return 0.0


@nb.njit(cache=True)
def problem1_kernel(params, x, s, spare, q, j):
    g = normal(s, spare)
    y = x[0] + x[1] * g
    q[0] = _clamp01(y) - 0.5
    q[1] = _clamp01(y - 1.0) - 0.5
    q[2] = _clamp01(2.0 * y - 1.0) - 0.2
    d0 = _ramp_slope(y)
    d1 = _ramp_slope(y - 1.0)
    d2 = 2.0 * _ramp_slope(2.0 * y - 1.0)
    j[0, 0] = d0
    j[0, 1] = d0 * g
    j[1, 0] = d1
    j[1, 1] = d1 * g
    j[2, 0] = d2
    j[2, 1] = d2 * g


@nb.njit(cache=True)
def problem1_kernel_fixed_g(params, x, s, spare, q, j):
    """Problem 1 pair with G taken from ``params[0]``; consumes no randomness."""
    g = params[0]
    y = x[0] + x[1] * g
    q[0] = _clamp01(y) - 0.5
    q[1] = _clamp01(y - 1.0) - 0.5
    q[2] = _clamp01(2.0 * y - 1.0) - 0.2
    d0 = _ramp_slope(y)
    d1 = _ramp_slope(y - 1.0)
    d2 = 2.0 * _ramp_slope(2.0 * y - 1.0)
    j[0, 0] = d0
    j[0, 1] = d0 * g
    j[1, 0] = d1
    j[1, 1] = d1 * g
    j[2, 0] = d2
    j[2, 1] = d2 * g


def problem1_moments(x):
    """Exact E[Q^] and E[J^] for Problem 1 from Gaussian integrals."""
    mu, sigma = float(x[0]), float(x[1])
    qbar = np.empty(3)
    jbar = np.empty((3, 2))
    for i, (a, b, t) in enumerate(zip(P1_SLOPES, P1_SHIFTS, P1_TARGETS)):
        # a*y - b in (0, 1)  <=>  G in (z_lo, z_hi)
        z_lo = (b / a - mu) / sigma
        z_hi = ((b + 1.0) / a - mu) / sigma
        p_in = special.ndtr(z_hi) - special.ndtr(z_lo)
        d_pdf = _phi(z_lo) - _phi(z_hi)
        qbar[i] = a * (mu * p_in + sigma * d_pdf) - b * p_in + special.ndtr(-z_hi) - t
        jbar[i, 0] = a * p_in
        jbar[i, 1] = a * d_pdf
    return qbar, jbar


def _phi(z):
    return math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def problem1_gradient(x) -> np.ndarray:
    qbar, jbar = problem1_moments(x)
    return jbar.T @ qbar


def problem1_hessian(x, h: float = 1e-6) -> np.ndarray:
    """Central differences of the exact gradient."""
    x = np.asarray(x, dtype=np.float64)
    cols = [(problem1_gradient(x + h * e) - problem1_gradient(x - h * e)) / (2 * h)
            for e in np.eye(2)]
    hess = np.column_stack(cols)
    return 0.5 * (hess + hess.T)


def problem1_reference() -> ReferenceSolution:
    """Published reference point with its exact Gauss-Newton matrix.

    The preconditioner is ``Jbar^T Jbar`` with ``Jbar = E[J^(x*)]`` from
    :func:`problem1_moments`; ``hessian`` is the full Hessian of the
    expected objective at the same point.
    """
    x_star = P1_PUBLISHED_X_STAR.copy()
    _, jbar = problem1_moments(x_star)
    gn = jbar.T @ jbar
    return ReferenceSolution(x_star=x_star, precond=0.5 * (gn + gn.T),
                             hessian=problem1_hessian(x_star))


class Problem1(McLsProblem):
    name = "problem1"
    kernel = staticmethod(problem1_kernel)

    def __init__(self, reference: Optional[ReferenceSolution] = None):
        box = BoxConstraints(np.array([0.0, 1.0]), np.array([2.0, 3.0]))
        super().__init__(2, 3, box, reference or problem1_reference())

    def initial_point(self, rng: RunRng) -> np.ndarray:
        return P1_START.copy()

    def expected(self, x):
        return problem1_moments(x)

    def describe(self) -> dict:
        return {"name": self.name, "n": 2, "m": 3}


# ----------------------------------------------------------------- Problem 2

B_LOW, B_HIGH = 0.15, 0.85


@nb.njit(cache=True)
def problem2_kernel(params, x, s, spare, q, j):
    m, n = j.shape
    # params = [A (row-major m*n), y (m)]
    for c in range(n):
        b = B_LOW + (B_HIGH - B_LOW) * uniform(s)
        e = math.exp(x[c])
        bu = 0.5 * b * (e - 1.0 / e)
        bc = 0.5 * b * (e + 1.0 / e)
        for r in range(m):
            a = params[r * n + c]
            j[r, c] = a * bc
            if c == 0:
                q[r] = a * bu
            else:
                q[r] += a * bu
    off = m * n
    for r in range(m):
        q[r] -= params[off + r]


def problem2_matrix(n: int, m: int) -> np.ndarray:
    i = np.arange(1, m + 1, dtype=np.float64)[:, None]
    k = np.arange(1, n + 1, dtype=np.float64)[None, :]
    return np.exp(-0.5 * n * m * (i / m - k / n) ** 2)


class Problem2(McLsProblem):
    name = "problem2"
    kernel = staticmethod(problem2_kernel)

    def __init__(self, n: int, m: int, instance_seed: Optional[int] = None):
        if not 1 <= n <= m:
            raise ValueError("Problem 2 needs 1 <= n <= m")
        a = problem2_matrix(n, m)
        if np.linalg.matrix_rank(a) < n:
            raise ValueError(f"A^T A is singular for n={n}, m={m}")
        y = np.arange(1, m + 1, dtype=np.float64) ** 2
        u_star = 2.0 * np.linalg.solve(a.T @ a, a.T @ y)
        box = BoxConstraints(np.arcsinh(u_star - 1.0), np.arcsinh(u_star + 1.0))
        x_star = np.arcsinh(u_star)
        jbar = 0.5 * a * np.cosh(x_star)[None, :]
        gn = jbar.T @ jbar
        reference = ReferenceSolution(x_star=x_star, precond=0.5 * (gn + gn.T))
        super().__init__(n, m, box, reference, np.concatenate([a.ravel(), y]))
        self.a_matrix = a
        self.y = y
        self.u_star = u_star
        self.instance_seed = instance_seed

    def expected(self, x):
        x = np.asarray(x, dtype=np.float64)
        qbar = 0.5 * self.a_matrix @ np.sinh(x) - self.y
        jbar = 0.5 * self.a_matrix * np.cosh(x)[None, :]
        return qbar, jbar

    def initial_point(self, rng: RunRng) -> np.ndarray:
        # A fixed instance seed pins one starting point for every run.
        if self.instance_seed is not None:
            return super().initial_point(rng_for_run(self.instance_seed, 0))
        return super().initial_point(rng)

    def describe(self) -> dict:
        out = {"name": self.name, "n": self.dim_n, "m": self.dim_m}
        if self.instance_seed is not None:
            out["instance_seed"] = self.instance_seed
        return out

    def to_json(self) -> dict:
        return {
            **self.describe(),
            "a_matrix": self.a_matrix.tolist(),
            "y": self.y.tolist(),
            "u_star": self.u_star.tolist(),
            "box": {"lower": self.box.lower.tolist(), "upper": self.box.upper.tolist()},
        }


# ------------------------------------------------------- linear-Gaussian


@nb.njit(cache=True)
def linear_gaussian_kernel(params, x, s, spare, q, j):
    m, n = j.shape
    # params = [J (m*n), x_star (n), chol (m*m), jac_noise_scale]
    xs = m * n
    ch = xs + n
    scale = params[ch + m * m]
    for r in range(m):
        acc = 0.0
        for c in range(n):
            acc += params[r * n + c] * (x[c] - params[xs + c])
        q[r] = acc
    for r in range(m):
        z = normal(s, spare)
        for r2 in range(r, m):
            q[r2] += params[ch + r2 * m + r] * z
    for r in range(m):
        for c in range(n):
            j[r, c] = params[r * n + c]
    if scale != 0.0:
        for r in range(m):
            for c in range(n):
                j[r, c] += scale * normal(s, spare)


class LinearGaussianProblem(McLsProblem):
    """Residual ``J (x - x*) + eps`` with ``eps ~ N(0, noise_cov)``.

    With ``jac_noise_scale > 0`` the Jacobian estimate gets independent
    N(0, scale^2) entries added, so the second variance component is nonzero.
    """

    name = "linear_gaussian"
    kernel = staticmethod(linear_gaussian_kernel)

    def __init__(self, j_matrix, x_star, noise_cov=None, jac_noise_scale: float = 0.0,
                 box: Optional[BoxConstraints] = None):
        jm = np.atleast_2d(np.asarray(j_matrix, dtype=np.float64))
        m, n = jm.shape
        xs = np.asarray(x_star, dtype=np.float64).reshape(n)
        cov = np.zeros((m, m)) if noise_cov is None else np.asarray(noise_cov, dtype=np.float64)
        chol = _psd_cholesky(cov)
        gn = jm.T @ jm
        ref = ReferenceSolution(x_star=xs, precond=0.5 * (gn + gn.T))
        params = np.concatenate([jm.ravel(), xs, chol.ravel(), [float(jac_noise_scale)]])
        super().__init__(n, m, box, ref, params)
        self.j_matrix = jm
        self.x_star = xs
        self.noise_cov = cov
        self.noise_chol = chol
        self.jac_noise_scale = float(jac_noise_scale)

    def expected(self, x):
        return self.j_matrix @ (np.asarray(x, dtype=np.float64) - self.x_star), self.j_matrix

    def initial_point(self, rng: RunRng) -> np.ndarray:
        if self.box.contains(self.x_star + 1.0):
            return self.x_star + 1.0
        return super().initial_point(rng)

    def describe(self) -> dict:
        return {
            "name": self.name, "n": self.dim_n, "m": self.dim_m,
            "j_matrix": self.j_matrix.tolist(), "x_star": self.x_star.tolist(),
            "noise_cov": self.noise_cov.tolist(), "jac_noise_scale": self.jac_noise_scale,
        }


def _psd_cholesky(cov: np.ndarray) -> np.ndarray:
    if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
        raise ValueError("noise covariance must be symmetric")
    if not np.any(cov):
        return np.zeros_like(cov)
    w, v = np.linalg.eigh(cov)
    if w.min() < -1e-12 * max(1.0, w.max()):
        raise ValueError("noise covariance must be positive semidefinite")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        # Semidefinite: fall back to a lower-triangular square root via QR.
        root = v * np.sqrt(np.clip(w, 0.0, None))
        r = np.linalg.qr(root.T, mode="r")
        low = r.T
        return low * np.sign(np.where(np.diag(low) == 0, 1.0, np.diag(low)))[None, :]


def make_problem(spec: dict) -> McLsProblem:
    """Build a problem from its JSON description."""
    name = spec.get("name")
    if name == "problem1":
        return Problem1()
    if name == "problem2":
        return Problem2(int(spec["n"]), int(spec["m"]), spec.get("instance_seed"))
    if name == "linear_gaussian":
        return LinearGaussianProblem(spec["j_matrix"], spec["x_star"], spec.get("noise_cov"),
                                     spec.get("jac_noise_scale", 0.0))
    raise ValueError(f"unknown problem {name!r}")


P1_RECOMPUTE_START = np.array([1.0, 1.0])
P1_RECOMPUTE_INSTANCES = 8


def problem1_reference_recompute(budget: int = 100_000, rng: Optional[RunRng] = None,
                                 instances: int = P1_RECOMPUTE_INSTANCES):
    """Numerically locate the Problem 1 solution with averaged SGD.

    ``budget`` is the iteration count per instance (10 pairs each, gains
    ``1/k^0.66``). The step matrix is the inverse of a 1000-pair U-statistic
    estimate of ``Jbar^T Jbar`` at the start point (1, 1). Returns the mean
    of the instance outputs and the covariance of that mean.
    """
    from .estimators import grad_usample_arrays
    from .optimizers import (OptimizerConfig, Optimizer, SampleSchedule,
                             StepSchedule, run_until)

    if budget < 1000:
        raise ValueError("budget must be at least 1000 iterations")
    if instances < 2:
        raise ValueError("need at least 2 instances for a covariance")
    rng = rng if rng is not None else RunRng.from_seed(0)
    prob = Problem1()
    qs, js = prob.sample_many(P1_RECOMPUTE_START, 1000, rng)
    # U-statistic of Jbar^T Jbar, column by column: Q-slot takes J's columns.
    gn = np.column_stack([grad_usample_arrays(js[:, :, c], js) for c in range(2)])
    gn = 0.5 * (gn + gn.T)
    cfg = OptimizerConfig("asgd", StepSchedule(1.0, 0.66, 0.0, np.linalg.inv(gn)),
                          SampleSchedule(10.0, 0.0), label="reference_asgd")
    opt = Optimizer(cfg, prob)
    outs = []
    for _ in range(instances):
        sub = RunRng.from_seed(rng.next_u64())
        x, _ = run_until(opt, P1_RECOMPUTE_START, sub, 10.0 * budget)
        outs.append(x)
    outs = np.array(outs)
    return outs.mean(axis=0), np.cov(outs, rowvar=False, ddof=1) / instances
