"""Gradient estimators built from sample pairs.

* symmetric two-sample estimator ``(Ja^T Qb + Jb^T Qa) / 2``
* the N-sample U-statistic over ordered pairs ``i != j``
* the hybrid running-mean estimator driven by forget rates
* Monte Carlo estimates of the two variance components of the U-statistic
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numba as nb
import numpy as np

from .core import McLsProblem, SamplePair
from .rng import RunRng

FORGET_FORMS = ("rational", "sqrt_rational", "constant_like")
_FORM_CODES = {name: i for i, name in enumerate(FORGET_FORMS)}
SIGMA_MIN_PAIRS = 1000


# ---------------------------------------------------------------- kernels


@nb.njit(inline="always", cache=True)
def usample_accumulate(q, j, sum_q, sum_j, cross):
    """Add one pair to the running sums of the U-statistic."""
    m, n = j.shape
    for a in range(m):
        sum_q[a] += q[a]
        for b in range(n):
            sum_j[a, b] += j[a, b]
            cross[b] += j[a, b] * q[a]


@nb.njit(inline="always", cache=True)
def usample_finish(sum_q, sum_j, cross, count, out):
    m, n = sum_j.shape
    scale = 1.0 / (count * (count - 1.0))
    for b in range(n):
        acc = 0.0
        for a in range(m):
            acc += sum_j[a, b] * sum_q[a]
        out[b] = (acc - cross[b]) * scale


@nb.njit(inline="always", cache=True)
def forget_rate(form, param, t):
    """Forget rate at 1-based index ``t`` for the given form code."""
    if t <= 1.0:
        return 1.0
    if form == 0:
        return (1.0 + param) / (t + param)
    if form == 1:
        return math.sqrt((1.0 + param) / (t + param))
    return param / (1.0 - (1.0 - param) ** t)


@nb.njit(inline="always", cache=True)
def hybrid_kernel(bar_q, bar_j, sum_j, sum_jtj, t, q, j, zeta, g):
    """Hybrid gradient from the pre-update means, then fold in the new pair.

    ``t`` is the 1-based index of the incoming pair; ``g`` is zero for t == 1.
    """
    m, n = j.shape
    for b in range(n):
        g[b] = 0.0
    if t > 1:
        for b in range(n):
            acc = 0.0
            for a in range(m):
                acc += bar_j[a, b] * q[a] + j[a, b] * bar_q[a]
            g[b] = 0.5 * acc
    keep = 1.0 - zeta
    for a in range(m):
        bar_q[a] = keep * bar_q[a] + zeta * q[a]
        for b in range(n):
            bar_j[a, b] = keep * bar_j[a, b] + zeta * j[a, b]
            sum_j[a, b] += j[a, b]
    for b in range(n):
        for c in range(n):
            acc = 0.0
            for a in range(m):
                acc += j[a, b] * j[a, c]
            sum_jtj[b, c] += acc


# ------------------------------------------------------------ estimators


def _stack(pairs: Sequence[SamplePair]):
    qs = np.stack([np.asarray(p.qhat, dtype=np.float64) for p in pairs])
    js = np.stack([np.asarray(p.jhat, dtype=np.float64) for p in pairs])
    if js.ndim != 3 or qs.shape[1] != js.shape[1]:
        raise ValueError("sample pairs have inconsistent shapes")
    return qs, js


def grad_two_sample(a: SamplePair, b: SamplePair) -> np.ndarray:
    """Symmetric two-sample gradient estimate; unbiased for J^T Q."""
    qa, ja = np.asarray(a.qhat, float), np.asarray(a.jhat, float)
    qb, jb = np.asarray(b.qhat, float), np.asarray(b.jhat, float)
    if ja.shape != jb.shape or qa.shape != qb.shape or ja.shape[0] != qa.shape[0]:
        raise ValueError("sample pairs have inconsistent shapes")
    return 0.5 * (ja.T @ qb + jb.T @ qa)


def grad_usample_arrays(qs: np.ndarray, js: np.ndarray) -> np.ndarray:
    """U-statistic gradient from stacked pairs (N, m) and (N, m, n)."""
    count = qs.shape[0]
    if count < 2:
        raise ValueError("the U-statistic gradient needs at least two pairs")
    qs = np.ascontiguousarray(qs, dtype=np.float64)
    js = np.ascontiguousarray(js, dtype=np.float64)
    m, n = js.shape[1], js.shape[2]
    sum_q = np.zeros(m)
    sum_j = np.zeros((m, n))
    cross = np.zeros(n)
    for k in range(count):
        usample_accumulate(qs[k], js[k], sum_q, sum_j, cross)
    out = np.empty(n)
    usample_finish(sum_q, sum_j, cross, float(count), out)
    return out


def grad_usample(pairs: Sequence[SamplePair]) -> np.ndarray:
    """(1 / N(N-1)) * sum over i != j of J_i^T Q_j, in O(N m n)."""
    if len(pairs) < 2:
        raise ValueError("the U-statistic gradient needs at least two pairs")
    return grad_usample_arrays(*_stack(pairs))


@dataclass(frozen=True)
class ForgetSchedule:
    """Forget rates ``zeta_t`` for the hybrid running means.

    ``rational``: (1+p)/(t+p); ``sqrt_rational``: sqrt((1+p)/(t+p));
    ``constant_like``: C/(1-(1-C)^t) with ``p`` playing the role of C.
    """

    p: float = 2.0
    form: str = "rational"

    VALIDATE_UPTO = 10_000

    def __post_init__(self):
        if self.form not in _FORM_CODES:
            raise ValueError(f"unknown forget form {self.form!r}")
        if self.form == "constant_like":
            if not 0.0 < self.p < 1.0:
                raise ValueError("constant_like forget rate needs 0 < C < 1")
        elif self.p < 0:
            raise ValueError("forget parameter p must be >= 0")
        self._validate()

    @property
    def code(self) -> int:
        return _FORM_CODES[self.form]

    def zeta(self, t: int) -> float:
        return float(forget_rate(self.code, float(self.p), float(t)))

    def rates(self, upto: int) -> np.ndarray:
        t = np.arange(1, upto + 1, dtype=np.float64)
        if self.form == "rational":
            z = (1.0 + self.p) / (t + self.p)
        elif self.form == "sqrt_rational":
            z = np.sqrt((1.0 + self.p) / (t + self.p))
        else:
            z = self.p / (1.0 - (1.0 - self.p) ** t)
        z[0] = 1.0
        return z

    def _validate(self):
        z = self.rates(self.VALIDATE_UPTO)
        if z[0] != 1.0:
            raise ValueError("forget schedule must start at zeta_1 = 1")
        if np.any(z[1:] <= 0.0) or np.any(z[1:] >= 1.0):
            raise ValueError("forget rates must lie in (0, 1) for t > 1")
        inv = 1.0 / z
        # Equal weights (p = 0) sit exactly on the bound; allow float slack.
        if np.any(np.diff(inv) > 1.0 + 1e-9):
            raise ValueError("forget schedule violates 1/zeta_{t+1} <= 1/zeta_t + 1")


@dataclass(frozen=True)
class HybridState:
    bar_q: np.ndarray
    bar_j: np.ndarray
    sum_j: np.ndarray
    sum_jtj: np.ndarray
    t: int = 1
    last_zeta: float = 0.0

    @classmethod
    def empty(cls, m: int, n: int) -> "HybridState":
        return cls(np.zeros(m), np.zeros((m, n)), np.zeros((m, n)), np.zeros((n, n)))

    def copy(self) -> "HybridState":
        return replace(self, bar_q=self.bar_q.copy(), bar_j=self.bar_j.copy(),
                       sum_j=self.sum_j.copy(), sum_jtj=self.sum_jtj.copy())


def hybrid_update(state: HybridState, pair: SamplePair, zeta_t: float):
    """Return ``(g_t, new_state)`` for the hybrid estimator."""
    if not 0.0 < zeta_t <= 1.0:
        raise ValueError(f"forget rate {zeta_t} outside (0, 1]")
    if state.t == 1 and zeta_t != 1.0:
        raise ValueError("the first forget rate must be 1")
    new = state.copy()
    q = np.ascontiguousarray(pair.qhat, dtype=np.float64)
    j = np.ascontiguousarray(pair.jhat, dtype=np.float64)
    if j.shape != new.bar_j.shape:
        raise ValueError("sample pair shape does not match hybrid state")
    g = np.empty(j.shape[1])
    hybrid_kernel(new.bar_q, new.bar_j, new.sum_j, new.sum_jtj, state.t, q, j, zeta_t, g)
    return g, replace(new, t=state.t + 1, last_zeta=float(zeta_t))


def hybrid_direct(pairs: Sequence[SamplePair], weights: Sequence[float]) -> np.ndarray:
    """Weighted form of the hybrid gradient at the last pair (explicit weights q_i)."""
    qs, js = _stack(pairs)
    w = np.asarray(weights, dtype=np.float64)[: len(pairs) - 1]
    t = len(pairs)
    if t < 2:
        return np.zeros(js.shape[2])
    num = np.einsum("i,imn,m->n", w, js[:-1], qs[-1]) + js[-1].T @ (w @ qs[:-1])
    return num / (2.0 * w.sum())


# ------------------------------------------------------ variance components


@dataclass(frozen=True)
class SigmaDecomposition:
    sigma_a2: np.ndarray
    sigma_b2: np.ndarray
    num_samples: int
    x_eval: np.ndarray

    def usample_variance(self, count: int) -> np.ndarray:
        """Predicted covariance of the U-statistic gradient with ``count`` pairs."""
        return self.sigma_a2 / count + self.sigma_b2 / (count * (count - 1))


def sigma_from_samples(qs: np.ndarray, js: np.ndarray, x=None) -> SigmaDecomposition:
    count = qs.shape[0]
    if count < SIGMA_MIN_PAIRS:
        raise ValueError(f"need at least {SIGMA_MIN_PAIRS} pairs, got {count}")
    q_mean = qs.mean(axis=0)
    j_mean = js.mean(axis=0)
    a_terms = qs @ j_mean + np.einsum("kmn,m->kn", js, q_mean)
    sigma_a2 = np.cov(a_terms, rowvar=False, ddof=1).reshape(js.shape[2], js.shape[2])
    eq = qs - q_mean
    ej = js - j_mean
    half = count // 2
    first, second = slice(0, 2 * half, 2), slice(1, 2 * half, 2)
    b_terms = (np.einsum("kmn,km->kn", ej[first], eq[second])
               + np.einsum("kmn,km->kn", ej[second], eq[first]))
    sigma_b2 = 0.5 * np.cov(b_terms, rowvar=False, ddof=1).reshape(sigma_a2.shape)
    return SigmaDecomposition(
        sigma_a2=0.5 * (sigma_a2 + sigma_a2.T),
        sigma_b2=0.5 * (sigma_b2 + sigma_b2.T),
        num_samples=count,
        x_eval=None if x is None else np.asarray(x, dtype=np.float64),
    )


def estimate_sigma_decomposition(problem: McLsProblem, x, num_pairs: int,
                                 rng: RunRng) -> SigmaDecomposition:
    """Monte Carlo estimate of the two covariance components at ``x``.

    The first is the covariance of ``J^T Q_i + J_i^T Q`` with plug-in means;
    the second is half the covariance of ``eJ_i^T eQ_k + eJ_k^T eQ_i`` over
    disjoint consecutive pairs (i, k) of centered samples.
    """
    if num_pairs < SIGMA_MIN_PAIRS:
        raise ValueError(f"need at least {SIGMA_MIN_PAIRS} pairs, got {num_pairs}")
    qs, js = problem.sample_many(x, num_pairs, rng)
    return sigma_from_samples(qs, js, x)
