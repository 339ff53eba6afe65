"""Numerical oracles for asymptotic behavior and fitting of error traces."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numba as nb
import numpy as np

N_INFINITY = math.inf
MIN_FIT_POINTS = 10
DIVERGENCE_LIMIT = 1e12


class StabilityError(ValueError):
    """Parameters outside the region where the asymptotic constant exists."""


class RecurrenceDivergence(ArithmeticError):
    def __init__(self, step: int, value: float):
        super().__init__(f"covariance recurrence diverged at step {step} (trace {value:.3g})")
        self.step = step
        self.value = value


# ------------------------------------------------------------ asymptotes


@dataclass(frozen=True)
class AsymptoteSpec:
    """Inputs of the level ``C`` in ``E||x - x*||^2 ~ C / cost``.

    ``n_samples`` is the pairs-per-gradient count ``N``; pass
    :data:`N_INFINITY` for methods whose effective precision grows without
    bound (IP, the hybrids, SGN).
    """

    s_matrix: np.ndarray
    sigma_a2: np.ndarray
    sigma_b2: np.ndarray
    n_samples: float = N_INFINITY

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.s_matrix, dtype=np.float64))
        object.__setattr__(self, "s_matrix", s)
        object.__setattr__(self, "sigma_a2", np.atleast_2d(np.asarray(self.sigma_a2, float)))
        object.__setattr__(self, "sigma_b2", np.atleast_2d(np.asarray(self.sigma_b2, float)))
        if not (s.shape == self.sigma_a2.shape == self.sigma_b2.shape and s.shape[0] == s.shape[1]):
            raise ValueError("S, Sigma_A^2 and Sigma_B^2 must be square and of equal size")
        if not (self.n_samples == N_INFINITY or self.n_samples >= 2):
            raise ValueError("n_samples must be >= 2 or N_INFINITY")


def theoretical_asymptote(spec: AsymptoteSpec) -> float:
    """``tr(S^-1 (Sigma_A^2 + Sigma_B^2 / (N - 1)) S^-1)``."""
    s = spec.s_matrix
    if np.linalg.cond(s) > 1e14 or not np.all(np.isfinite(s)):
        raise np.linalg.LinAlgError("S is singular")
    sigma = spec.sigma_a2.copy()
    if spec.n_samples != N_INFINITY:
        sigma = sigma + spec.sigma_b2 / (spec.n_samples - 1.0)
    s_inv = np.linalg.inv(s)
    return float(np.trace(s_inv @ sigma @ s_inv.T))


# ---------------------------------------------------- hybrid recurrence


def hybrid_denominator(eta: float, p: float) -> float:
    """``4 (eta + 2p)(4 eta p + 3 eta - 2p - 1)``.

    The two factors are ``4 tr(M - I/2)`` and ``4 det(M - I/2)`` for the drift
    matrix ``M = [[eta/2, eta/2], [-(1+p), 1+p]]``, so positivity is exactly
    the condition that both eigenvalues of ``M`` have real part above 1/2.
    """
    return (32 * eta - 16) * p**2 + (16 * eta**2 + 16 * eta - 8) * p + 12 * eta**2 - 4 * eta


def hybrid_constant_closed_form(eta: float, p: float) -> float:
    """Limit of ``t E[y_t^2]`` for the hybrid with ``A_t = eta S^-1 / t``
    and forget rate ``(1 + p) / (t + p)``, in units of ``S^-1 Sigma_A^2 S^-1``.

    This is the rational solution of the stationary Lyapunov equation
    ``(M - I/2) V + V (M - I/2)^T = r r^T`` with ``r = (-eta/2, 1+p)``.
    """
    den = hybrid_denominator(eta, p)
    if not den > 0 or not eta + 2 * p > 0:
        raise StabilityError(f"unstable hybrid parameters eta={eta}, p={p} (denominator {den:.4g})")
    return eta**2 * (16 * p**2 + (22 + 4 * eta) * p + 8 + 3 * eta) / den


def hybrid_constant_eigen(eta: float, p: float) -> float:
    """The same constant from the eigendecomposition ``M = U diag(l) U^-1``:
    ``e1^T U ((U^-1 r r^T U^-T) o [1/(l_i + l_j - 1)]) U^T e1``."""
    m = np.array([[eta / 2, eta / 2], [-(1 + p), 1 + p]], dtype=np.complex128)
    lam, u = np.linalg.eig(m)
    if lam.real.min() <= 0.5:
        raise StabilityError(f"eigenvalue real part {lam.real.min():.4g} <= 1/2")
    r = np.array([-eta / 2, 1 + p], dtype=np.complex128)
    ur = np.linalg.solve(u, r)
    core = np.outer(ur, ur) / (lam[:, None] + lam[None, :] - 1.0)
    v = u @ core @ u.T
    return float(v[0, 0].real)


def hybrid_constant_approx(p: float) -> float:
    """Large-p approximation of the constant at ``eta = 1``."""
    return 1.0 + 0.125 / (p + 1.0 / 3.0)


@dataclass(frozen=True)
class RecurrenceSpec:
    eta: float = 1.0
    p: float = 0.0
    averaged: bool = False
    alpha: float = 0.75
    steps: int = 100_000

    def __post_init__(self):
        if self.steps < 1000:
            raise ValueError("recurrence needs at least 1000 steps")
        if not self.eta > 0 or self.p < 0:
            raise ValueError("need eta > 0 and p >= 0")
        if self.averaged:
            if not 0.5 < self.alpha < 1.0:
                raise ValueError("averaged recurrence needs 1/2 < alpha < 1")
        elif not hybrid_denominator(self.eta, self.p) > 0:
            raise StabilityError(f"unstable hybrid parameters eta={self.eta}, p={self.p}")


@nb.njit(cache=True)
def _plain_recurrence(eta, p, steps, sigma, out):
    # W = [[w11, w12], [w12, w22]] for (y, mu); scalar blocks.
    w11 = 0.0
    w12 = 0.0
    w22 = 0.0
    for t in range(1, steps + 1):
        h = eta / (2.0 * t)
        z = (1.0 + p) / (t + p)
        # I - P = [[1-h, -h], [z, 1-z]]
        a11, a12, a21, a22 = 1.0 - h, -h, z, 1.0 - z
        n11 = a11 * a11 * w11 + 2 * a11 * a12 * w12 + a12 * a12 * w22
        n12 = a11 * a21 * w11 + (a11 * a22 + a12 * a21) * w12 + a12 * a22 * w22
        n22 = a21 * a21 * w11 + 2 * a21 * a22 * w12 + a22 * a22 * w22
        w11 = n11 + h * h * sigma
        w12 = n12 - h * z * sigma
        w22 = n22 + z * z * sigma
        # state after step t describes y_{t+1}
        out[t - 1] = (t + 1.0) * w11
        if not abs(w11) + abs(w22) < 1e12:
            return t
    return 0


@nb.njit(cache=True)
def _averaged_recurrence(eta, p, alpha, steps, sigma, out):
    # Covariance of (y~_t, mu_t, y_{t-1}); y_{t-1} averages y~_2 .. y~_{t-1}.
    w00 = w01 = w02 = w11 = w12 = w22 = 0.0
    for t in range(1, steps + 1):
        h = eta / (2.0 * t**alpha)
        z = (1.0 + p) / (t + p)
        a00, a01, a10, a11 = 1.0 - h, -h, z, 1.0 - z
        if t >= 2:
            a20 = 1.0 / (t - 1.0)
            a22 = 1.0 - a20
        else:
            a20, a22 = 0.0, 1.0
        n00 = a00 * a00 * w00 + 2 * a00 * a01 * w01 + a01 * a01 * w11 + h * h * sigma
        n01 = a00 * a10 * w00 + (a00 * a11 + a01 * a10) * w01 + a01 * a11 * w11 - h * z * sigma
        n11 = a10 * a10 * w00 + 2 * a10 * a11 * w01 + a11 * a11 * w11 + z * z * sigma
        n02 = a20 * (a00 * w00 + a01 * w01) + a22 * (a00 * w02 + a01 * w12)
        n12 = a20 * (a10 * w00 + a11 * w01) + a22 * (a10 * w02 + a11 * w12)
        n22 = a20 * a20 * w00 + 2 * a20 * a22 * w02 + a22 * a22 * w22
        w00, w01, w02, w11, w12, w22 = n00, n01, n02, n11, n12, n22
        # the third component now holds y_t, the average of t - 1 raw iterates
        out[t - 1] = t * w22
        if not abs(w00) + abs(w11) + abs(w22) < 1e12:
            return t
    return 0


def hybrid_recurrence_simulate(spec: RecurrenceSpec, sigma=1.0) -> np.ndarray:
    """Normalized error ``t * tr(E[y_t y_t^T])`` after each step of the exact
    second-moment recurrence (entry ``j`` follows step ``j + 1``).

    ``sigma`` is the whitened noise covariance ``S^-1 Sigma_A^2 S^-1`` (a
    scalar or an n x n matrix). Under Hessian preconditioning every block of
    the recurrence is a multiple of the identity, so the scalar recurrence is
    run once with unit noise and scaled by ``tr(sigma)``.
    """
    scale = float(np.trace(np.atleast_2d(np.asarray(sigma, dtype=np.float64))))
    out = np.zeros(spec.steps)
    if spec.averaged:
        bad = _averaged_recurrence(spec.eta, spec.p, spec.alpha, spec.steps, 1.0, out)
    else:
        bad = _plain_recurrence(spec.eta, spec.p, spec.steps, 1.0, out)
    if bad:
        raise RecurrenceDivergence(int(bad), float(out[bad - 1]))
    return out * scale


def hybrid_recurrence_limit(spec: RecurrenceSpec, sigma=1.0) -> float:
    return float(hybrid_recurrence_simulate(spec, sigma)[-1])


# ----------------------------------------------------------- trace fits


class TraceFit(NamedTuple):
    slope: float
    level: float
    level_stderr: float = math.nan
    points: int = 0


def decade_window(costs) -> float:
    """Window fraction covering the last factor of ten of the cost range."""
    costs = np.asarray(costs, dtype=np.float64)
    span = math.log10(costs[-1] / costs[costs > 0][0])
    if span <= 1.0:
        return 1.0
    return 1.0 / span


def fit_trace(trace, window: float = 0.2, stderr=None) -> TraceFit:
    """Least-squares line through ``log(mse)`` against ``log(cost)``.

    ``trace`` is ``(costs, mse)`` or any object with ``costs`` and
    ``mse_mean`` (and optionally ``mse_stddev_of_mean``) attributes. Only the
    last ``window`` fraction of the log-cost range is used. ``level`` is
    ``mse * cost`` on the fitted line at the window's log-midpoint; its
    standard error is approximated by ``level`` times the mean relative
    standard error of the points in the window.
    """
    if hasattr(trace, "costs"):
        costs, mse = trace.costs, trace.mse_mean
        if stderr is None:
            stderr = getattr(trace, "mse_stddev_of_mean", None)
    else:
        costs, mse = trace
    costs = np.asarray(costs, dtype=np.float64)
    mse = np.asarray(mse, dtype=np.float64)
    if not 0.0 < window <= 1.0:
        raise ValueError("window must lie in (0, 1]")
    keep = costs > 0
    lc = np.log(costs[keep])
    lo_c, hi_c = lc[0], lc[-1]
    start = hi_c - window * (hi_c - lo_c)
    sel = lc >= start - 1e-12
    if sel.sum() < MIN_FIT_POINTS:
        raise ValueError(f"need at least {MIN_FIT_POINTS} checkpoints in the window, got {sel.sum()}")
    x = lc[sel]
    y_raw = mse[keep][sel]
    if np.any(y_raw <= 0):
        raise ValueError("mean squared errors must be positive to fit in log space")
    y = np.log(y_raw)
    slope, icept = np.polyfit(x, y, 1)
    mid = 0.5 * (start + hi_c)
    level = math.exp(icept + slope * mid + mid)
    level_se = math.nan
    if stderr is not None:
        rel = np.asarray(stderr, dtype=np.float64)[keep][sel] / y_raw
        level_se = level * float(rel.mean())
    return TraceFit(float(slope), float(level), level_se, int(sel.sum()))
