"""Iterative methods for MCLS problems.

Every method shares one compiled loop (:func:`_advance`) acting on a
packed state, so the Python-level steppers used in tests and the compiled
run loop used by the harness execute the same arithmetic.

Methods::

    sgd, asgd              fixed N, U-statistic gradient, optional averaging
    ip, aip                growing N_k = max(2, round(n1 k^q))
    hybrid_sgd, hybrid_asgd  one pair per iteration, running-mean gradient
    adagrad, adam          diagonal adaptive steps on the U-statistic gradient
    hybrid_adagrad, hybrid_adam, hybrid_adam_avg
    sgn, asgn              hybrid gradient with the online Gauss-Newton matrix
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numba as nb
import numpy as np

from .core import McLsProblem, project, project_into
from .estimators import (
    ForgetSchedule,
    HybridState,
    forget_rate,
    hybrid_kernel,
    usample_accumulate,
    usample_finish,
)
from .rng import RunRng

METHODS = (
    "sgd", "asgd", "ip", "aip", "hybrid_sgd", "hybrid_asgd", "adagrad", "adam",
    "hybrid_adagrad", "hybrid_adam", "hybrid_adam_avg", "sgn", "asgn",
)
METHOD_CODES = {name: i for i, name in enumerate(METHODS)}

AVERAGED = frozenset({"asgd", "aip", "hybrid_asgd", "hybrid_adam_avg", "asgn"})
HYBRID = frozenset({"hybrid_sgd", "hybrid_asgd", "hybrid_adagrad", "hybrid_adam",
                    "hybrid_adam_avg", "sgn", "asgn"})
NEEDS_SAMPLES = frozenset({"sgd", "asgd", "ip", "aip", "adagrad", "adam"})

GUARD_COND_MAX = 1e12

# Defaults applied when a config leaves a field out. Table-style presets for
# the adaptive and Gauss-Newton methods; plain 1/k gains elsewhere.
_STEP_DEFAULTS = {
    "sgd": (1.0, 1.0), "asgd": (1.0, 0.75), "ip": (1.0, 1.0), "aip": (1.0, 0.75),
    "hybrid_sgd": (1.0, 1.0), "hybrid_asgd": (1.0, 0.75),
    "adagrad": (0.1, 0.0), "hybrid_adagrad": (0.1, 0.0),
    "adam": (0.1, 0.5), "hybrid_adam": (0.1, 0.5), "hybrid_adam_avg": (1.0, 0.75),
    "sgn": (1.0, 1.0), "asgn": (1.0, 0.75),
}
_FORGET_DEFAULTS = {"sgn": ForgetSchedule(2.0, "sqrt_rational")}

# Packed scalar slots.
K, COST, WSUM, HT, LAST_ZETA, GUARD, SUM_N = range(7)
N_SCALARS = 7
# fpar slots
F_ETA, F_ALPHA, F_C, F_N1, F_Q, F_P, F_B1, F_B2, F_EPS = range(9)


class ConfigError(ValueError):
    """Invalid optimizer or experiment configuration; ``field`` names the culprit."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# ---------------------------------------------------------------- schedules


@dataclass(frozen=True)
class StepSchedule:
    """Gain ``a_k = eta / (k + c)^alpha`` applied through the matrix ``D``.

    ``precond`` is ``"identity"``, ``"reference"`` (inverse of the problem's
    reference Gauss-Newton matrix) or an explicit SPD matrix used as ``D``.
    """

    eta: float = 1.0
    alpha: float = 1.0
    c: float = 0.0
    precond: Union[str, np.ndarray] = "identity"

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError("step.eta", "must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("step.alpha", "must lie in [0, 1]")
        if not self.c >= 0:
            raise ConfigError("step.c", "must be >= 0")
        if isinstance(self.precond, str):
            if self.precond not in ("identity", "reference"):
                raise ConfigError("step.precond", f"unknown preconditioner {self.precond!r}")
        else:
            d = np.asarray(self.precond, dtype=np.float64)
            if d.ndim != 2 or d.shape[0] != d.shape[1] or not np.allclose(d, d.T):
                raise ConfigError("step.precond", "must be a symmetric square matrix")
            if np.linalg.eigvalsh(d).min() <= 0:
                raise ConfigError("step.precond", "must be positive definite")
            object.__setattr__(self, "precond", d)

    def gain(self, k: int) -> float:
        return self.eta / (k + self.c) ** self.alpha

    def matrix(self, problem: McLsProblem) -> np.ndarray:
        """The step matrix ``D`` for ``problem`` (reference inverse is taken once)."""
        n = problem.dim_n
        if isinstance(self.precond, np.ndarray):
            if self.precond.shape != (n, n):
                raise ConfigError("step.precond", f"expected a {n}x{n} matrix")
            return self.precond.copy()
        if self.precond == "identity":
            return np.eye(n)
        if problem.reference is None:
            raise ConfigError("step.precond", "problem has no reference solution")
        d = np.linalg.inv(problem.reference.precond)
        return 0.5 * (d + d.T)

    def to_dict(self) -> dict:
        pre = self.precond if isinstance(self.precond, str) else self.precond.tolist()
        return {"eta": self.eta, "alpha": self.alpha, "c": self.c, "precond": pre}


@dataclass(frozen=True)
class SampleSchedule:
    """Pairs per iteration ``N_k = max(2, round(n1 * k^q))``."""

    n1: float = 2.0
    q: float = 0.0

    def __post_init__(self):
        if not self.n1 > 0:
            raise ConfigError("samples.n1", "must be > 0")
        if not self.q >= 0:
            raise ConfigError("samples.q", "must be >= 0")

    def count(self, k: int) -> int:
        return int(_sample_count(float(self.n1), float(self.q), float(k)))

    def to_dict(self) -> dict:
        return {"n1": self.n1, "q": self.q}


@dataclass(frozen=True)
class AdamParams:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("adam", "betas must lie in [0, 1)")
        if not self.eps >= 0:
            raise ConfigError("adam.eps", "must be >= 0")


@dataclass(frozen=True)
class OptimizerConfig:
    method: str
    step: StepSchedule = field(default_factory=StepSchedule)
    samples: Optional[SampleSchedule] = None
    forget: Optional[ForgetSchedule] = None
    adam: AdamParams = field(default_factory=AdamParams)
    label: Optional[str] = None

    def __post_init__(self):
        if self.method not in METHOD_CODES:
            raise ConfigError("method", f"unknown method {self.method!r}")
        if self.method in NEEDS_SAMPLES and self.samples is None:
            raise ConfigError("samples", f"method {self.method!r} needs a sample schedule")
        if self.method in HYBRID and self.forget is None:
            object.__setattr__(self, "forget",
                               _FORGET_DEFAULTS.get(self.method, ForgetSchedule(2.0, "rational")))
        if self.method in ("sgd", "asgd", "adagrad", "adam") and self.samples.q != 0:
            raise ConfigError("samples.q", f"method {self.method!r} uses a fixed sample count")
        if self.label is None:
            object.__setattr__(self, "label", self._default_label())

    @property
    def averaged(self) -> bool:
        return self.method in AVERAGED

    @property
    def hybrid(self) -> bool:
        return self.method in HYBRID

    def _default_label(self) -> str:
        if self.method in ("sgd", "asgd", "adagrad", "adam"):
            return f"{self.method}_N{self.samples.count(1)}"
        if self.method in ("ip", "aip"):
            return f"{self.method}_n{self.samples.n1:g}_q{self.samples.q:g}"
        return self.method

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        """Parse a config mapping.

        Nested sections ``step``, ``samples``, ``forget``, ``adam`` are
        accepted, as are the flat shorthands ``N`` (fixed sample count), ``D``
        (preconditioner), ``eta``, ``alpha`` and ``c``.
        """
        if not isinstance(d, dict):
            raise ConfigError("method", "optimizer config must be an object")
        known = {"method", "label", "step", "samples", "forget", "adam",
                 "N", "D", "eta", "alpha", "c", "precond"}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(extra[0], "unknown field")
        method = d.get("method")
        if method not in METHOD_CODES:
            raise ConfigError("method", f"unknown method {method!r}")
        eta0, alpha0 = _STEP_DEFAULTS[method]
        step_d = {"eta": eta0, "alpha": alpha0, **dict(d.get("step") or {})}
        for key in ("eta", "alpha", "c"):
            if key in d:
                step_d[key] = d[key]
        if "D" in d or "precond" in d:
            step_d["precond"] = d.get("D", d.get("precond"))
        if isinstance(step_d.get("precond"), str) and step_d["precond"] == "I":
            step_d["precond"] = "identity"
        if isinstance(step_d.get("precond"), list):
            step_d["precond"] = np.asarray(step_d["precond"], dtype=np.float64)
        step = StepSchedule(**_fields("step", step_d, ("eta", "alpha", "c", "precond")))
        samples = None
        if "samples" in d:
            samples = SampleSchedule(**_fields("samples", d["samples"], ("n1", "q")))
        if "N" in d:
            samples = SampleSchedule(float(d["N"]), 0.0)
        forget = None
        if "forget" in d:
            try:
                forget = ForgetSchedule(**_fields("forget", d["forget"], ("p", "form")))
            except ValueError as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError("forget", str(exc)) from None
        adam = AdamParams(**_fields("adam", d.get("adam", {}), ("beta1", "beta2", "eps")))
        return cls(method, step, samples, forget, adam, d.get("label"))

    def to_dict(self) -> dict:
        out = {"method": self.method, "label": self.label, "step": self.step.to_dict()}
        if self.samples is not None:
            out["samples"] = self.samples.to_dict()
        if self.forget is not None:
            out["forget"] = {"p": self.forget.p, "form": self.forget.form}
        if self.method in ("adam", "hybrid_adam", "hybrid_adam_avg"):
            out["adam"] = {"beta1": self.adam.beta1, "beta2": self.adam.beta2,
                           "eps": self.adam.eps}
        return out


def _fields(section: str, d, allowed):
    if not isinstance(d, dict):
        raise ConfigError(section, "must be an object")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"{section}.{extra[0]}", "unknown field")
    return d


# ------------------------------------------------------------------- state


@dataclass
class OptimizerState:
    """Iterate and bookkeeping for one run.

    ``x`` is the reported iterate; ``x_tilde`` the raw iterate that steps
    act on (they coincide for non-averaged methods). ``diag_accum`` holds the
    AdaGrad accumulator (shape (n,)) or the Adam moments (shape (2, n)).
    """

    x: np.ndarray
    x_tilde: np.ndarray
    x_avg: Optional[np.ndarray] = None
    weight_sum: float = 0.0
    k: int = 0
    cost: int = 0
    hybrid: Optional[HybridState] = None
    diag_accum: Optional[np.ndarray] = None
    gn_guard_active: bool = True
    sum_n: int = 0

    @classmethod
    def initial(cls, x0, m: int, averaged=False, hybrid=False, diag=None) -> "OptimizerState":
        x0 = np.array(x0, dtype=np.float64)
        n = x0.shape[0]
        acc = None
        if diag == "adagrad":
            acc = np.zeros(n)
        elif diag == "adam":
            acc = np.zeros((2, n))
        return cls(x=x0.copy(), x_tilde=x0.copy(), x_avg=x0.copy() if averaged else None,
                   hybrid=HybridState.empty(m, n) if hybrid else None, diag_accum=acc)

    def copy(self) -> "OptimizerState":
        return replace(
            self, x=self.x.copy(), x_tilde=self.x_tilde.copy(),
            x_avg=None if self.x_avg is None else self.x_avg.copy(),
            hybrid=None if self.hybrid is None else self.hybrid.copy(),
            diag_accum=None if self.diag_accum is None else self.diag_accum.copy(),
        )


# ----------------------------------------------------------------- kernels


@nb.njit(inline="always", cache=True)
def _sample_count(n1, q, k):
    return max(2.0, float(np.round(n1 * k ** q)))


@nb.njit(inline="always", cache=True)
def _gn_matrix(sum_j, bar_j, sum_jtj, t, zeta_prev, out):
    """Online Gauss-Newton matrix from the pre-update hybrid sums."""
    m, n = sum_j.shape
    inv_z = 1.0 / zeta_prev
    lag = t - 1.0 - inv_z
    denom = lag * lag + (t - 1.0)
    for b in range(n):
        for c in range(b, n):
            acc = 0.0
            for a in range(m):
                acc += (sum_j[a, b] - bar_j[a, b] * inv_z) * (sum_j[a, c] - bar_j[a, c] * inv_z)
            v = (acc + sum_jtj[b, c]) / denom
            out[b, c] = v
            out[c, b] = v


@nb.njit(inline="always", cache=True)
def _chol_solve(mat, rhs, low, out):
    """Solve ``mat @ out = rhs`` by Cholesky; return a condition proxy or -1.

    The proxy is ``(max L_ii / min L_ii)^2``, a lower bound on the 2-norm
    condition number that is free once the factor exists.
    """
    n = mat.shape[0]
    for i in range(n):
        if not np.isfinite(mat[i, i]):
            return -1.0
        for j in range(i + 1):
            s = mat[i, j]
            for k in range(j):
                s -= low[i, k] * low[j, k]
            if i == j:
                if not s > 0.0:
                    return -1.0
                low[i, i] = math.sqrt(s)
            else:
                low[i, j] = s / low[j, j]
    dmax = 0.0
    dmin = np.inf
    for i in range(n):
        dmax = max(dmax, low[i, i])
        dmin = min(dmin, low[i, i])
    for i in range(n):
        s = rhs[i]
        for k in range(i):
            s -= low[i, k] * out[k]
        out[i] = s / low[i, i]
    for i in range(n - 1, -1, -1):
        s = out[i]
        for k in range(i + 1, n):
            s -= low[k, i] * out[k]
        out[i] = s / low[i, i]
    ratio = dmax / dmin
    return ratio * ratio


@nb.njit(inline="always", cache=True)
def _apply_gain(xt, dmat, g, a):
    n = xt.shape[0]
    for i in range(n):
        acc = 0.0
        for j in range(n):
            acc += dmat[i, j] * g[j]
        xt[i] -= a * acc


@nb.njit(inline="always", cache=True)
def _adagrad_apply(xt, accum, g, eta):
    # accum is (1, n) or larger; row 0 holds the squared-gradient sums.
    for i in range(xt.shape[0]):
        accum[0, i] += g[i] * g[i]
        if accum[0, i] > 0.0:
            xt[i] -= eta * g[i] / math.sqrt(accum[0, i])


@nb.njit(inline="always", cache=True)
def _adam_apply(xt, mom, g, k, alpha_t, b1, b2, eps):
    c1 = 1.0 - b1 ** k
    c2 = 1.0 - b2 ** k
    for i in range(xt.shape[0]):
        mom[0, i] = b1 * mom[0, i] + (1.0 - b1) * g[i]
        mom[1, i] = b2 * mom[1, i] + (1.0 - b2) * g[i] * g[i]
        xt[i] -= alpha_t * (mom[0, i] / c1) / (math.sqrt(mom[1, i] / c2) + eps)


@nb.njit(inline="always", cache=True)
def _average_into(x_avg, x_new, wsum, w):
    tot = wsum + w
    for i in range(x_avg.shape[0]):
        x_avg[i] = (wsum * x_avg[i] + w * x_new[i]) / tot
    return tot


@nb.njit(inline="always", cache=True)
def _sq_dist(x, y):
    acc = 0.0
    for i in range(x.shape[0]):
        d = x[i] - y[i]
        acc += d * d
    return acc


@nb.njit(cache=True)
def _advance(kernel, params, code, form, fpar, dmat, lo, hi, s, spare,
             x, xt, xavg, sc, bar_q, bar_j, sum_j, sum_jtj, acc,
             max_iters, budget, x_star, thresholds, out, idx0):
    """Iterate in place until ``max_iters`` steps or ``cost >= budget``.

    The whole loop lives in one compiled function: crossing a numba call
    boundary per iteration costs more than a cheap step itself.

    ``out[j]`` (for ``j >= idx0``) receives the squared error to ``x_star`` of
    the reported iterate with the largest cost not exceeding
    ``thresholds[j]``. Returns ``(status, next_idx, guard_off_at)``; status
    1 flags a non-finite value at iteration ``sc[K]``.
    """
    n = x.shape[0]
    m = bar_q.shape[0]
    q = np.zeros(m)
    jm = np.zeros((m, n))
    g = np.zeros(n)
    sq = np.zeros(m)
    sj = np.zeros((m, n))
    cross = np.zeros(n)
    bmat = np.zeros((n, n))
    low = np.zeros((n, n))
    eta = fpar[F_ETA]
    idx = idx0
    nthr = thresholds.shape[0]
    err = _sq_dist(x, x_star)
    guard_off = 0
    averaged = code == 1 or code == 3 or code == 5 or code == 10 or code == 12
    it = 0
    while it < max_iters and sc[COST] < budget:
        it += 1
        k = sc[K] + 1.0
        sc[K] = k
        gain = eta / (k + fpar[F_C]) ** fpar[F_ALPHA]
        weight = 1.0
        if code <= 3 or code == 6 or code == 7:
            nk = _sample_count(fpar[F_N1], fpar[F_Q], k)
            for a in range(m):
                sq[a] = 0.0
                for b in range(n):
                    sj[a, b] = 0.0
            for b in range(n):
                cross[b] = 0.0
            for _ in range(int(nk)):
                kernel(params, xt, s, spare, q, jm)
                usample_accumulate(q, jm, sq, sj, cross)
            usample_finish(sq, sj, cross, nk, g)
            sc[COST] += nk
            sc[SUM_N] += nk
            if code == 2:
                gain = eta * nk / sc[SUM_N]
            elif code == 3:
                weight = nk
        else:
            t = sc[HT] + 1.0
            zeta = forget_rate(form, fpar[F_P], t)
            kernel(params, xt, s, spare, q, jm)
            if code >= 11 and t > 1.0:
                _gn_matrix(sum_j, bar_j, sum_jtj, t, sc[LAST_ZETA], bmat)
            hybrid_kernel(bar_q, bar_j, sum_j, sum_jtj, t, q, jm, zeta, g)
            sc[HT] = t
            sc[LAST_ZETA] = zeta
            sc[COST] += 1.0
        finite = True
        for i in range(n):
            if not np.isfinite(g[i]):
                finite = False
        if not finite:
            return 1, idx, guard_off
        if code <= 5:
            _apply_gain(xt, dmat, g, gain)
        elif code == 6 or code == 8:
            _adagrad_apply(xt, acc, g, eta)
        elif code == 7 or code == 9 or code == 10:
            _adam_apply(xt, acc, g, k, gain, fpar[F_B1], fpar[F_B2], fpar[F_EPS])
        else:
            ok = False
            if k > 1.0:
                # cross is idle on hybrid paths; it holds the solved direction.
                cond = _chol_solve(bmat, g, low, cross)
                ok = cond > 0.0 and cond <= GUARD_COND_MAX
            if ok:
                sc[GUARD] = 0.0
                if guard_off == 0:
                    guard_off = int(k)
                for i in range(n):
                    xt[i] -= gain * cross[i]
            else:
                sc[GUARD] = 1.0
        project_into(xt, lo, hi)
        for i in range(n):
            if not np.isfinite(xt[i]):
                finite = False
        if not finite:
            return 1, idx, guard_off
        if averaged:
            sc[WSUM] = _average_into(xavg, xt, sc[WSUM], weight)
            for i in range(n):
                x[i] = xavg[i]
            project_into(x, lo, hi)
        else:
            for i in range(n):
                x[i] = xt[i]
        while idx < nthr and thresholds[idx] < sc[COST]:
            out[idx] = err
            idx += 1
        err = _sq_dist(x, x_star)
    if sc[COST] >= budget:
        while idx < nthr:
            out[idx] = err
            idx += 1
    return 0, idx, guard_off


def simulate(kernel, params, code, form, fpar, dmat, lo, hi, x0, x_star, rng: RunRng,
             budget, thresholds, m):
    """Run one optimization from ``x0`` until the cost reaches ``budget``.

    Returns ``(status, iterations, guard_off_at, sq_errors)`` where
    ``sq_errors[j]`` belongs to ``thresholds[j]`` and ``guard_off_at`` is the
    first iteration with a Gauss-Newton step (0 if none).
    """
    n = x0.shape[0]
    x = np.array(x0, dtype=np.float64)
    sc = np.zeros(N_SCALARS)
    sc[GUARD] = 1.0
    out = np.full(thresholds.shape[0], np.nan)
    status, _, guard_off = _advance(
        kernel, params, code, form, fpar, dmat, lo, hi, rng.state, rng.spare,
        x, x.copy(), x.copy(), sc, np.zeros(m), np.zeros((m, n)), np.zeros((m, n)),
        np.zeros((n, n)), np.zeros((2, n)), np.iinfo(np.int64).max, float(budget), x_star,
        np.ascontiguousarray(thresholds, dtype=np.float64), out, 0)
    return int(status), int(sc[K]), int(guard_off), out


# --------------------------------------------------------------- optimizers


_NO_THRESHOLDS = np.zeros(0)


class Optimizer:
    """Stepper bound to one config and one problem.

    ``step(state, rng)`` returns a new state; the input state is not touched.
    """

    def __init__(self, config: OptimizerConfig, problem: McLsProblem):
        self.config = config
        self.problem = problem
        self.code = METHOD_CODES[config.method]
        self.form = config.forget.code if config.forget is not None else 0
        self.dmat = np.ascontiguousarray(config.step.matrix(problem))
        self.fpar = pack_fpar(config)

    def init_state(self, x0) -> OptimizerState:
        method = self.config.method
        diag = None
        if method in ("adagrad", "hybrid_adagrad"):
            diag = "adagrad"
        elif method in ("adam", "hybrid_adam", "hybrid_adam_avg"):
            diag = "adam"
        x0 = project(x0, self.problem.box)
        return OptimizerState.initial(x0, self.problem.dim_m, self.config.averaged,
                                      self.config.hybrid, diag)

    def step(self, state: OptimizerState, rng: RunRng) -> OptimizerState:
        return self.advance(state, rng, 1)

    def advance(self, state: OptimizerState, rng: RunRng, iterations: int) -> OptimizerState:
        """Apply ``iterations`` steps in one compiled call."""
        if iterations < 1:
            raise ValueError("iterations must be >= 1")
        p = self.problem
        m, n = p.dim_m, p.dim_n
        new = state.copy()
        hyb = new.hybrid if new.hybrid is not None else HybridState.empty(m, n)
        sc = np.array([new.k, new.cost, new.weight_sum, hyb.t - 1, hyb.last_zeta,
                       float(new.gn_guard_active), new.sum_n], dtype=np.float64)
        acc = np.zeros((2, n))
        if new.diag_accum is not None:
            acc[: new.diag_accum.reshape(-1, n).shape[0]] = new.diag_accum.reshape(-1, n)
        xavg = new.x_avg if new.x_avg is not None else np.zeros(n)
        status, _, _ = _advance(
            p.kernel, p.params, self.code, self.form, self.fpar, self.dmat,
            p.box.lower, p.box.upper, rng.state, rng.spare, new.x, new.x_tilde, xavg, sc,
            hyb.bar_q, hyb.bar_j, hyb.sum_j, hyb.sum_jtj, acc, int(iterations), np.inf, new.x,
            _NO_THRESHOLDS, _NO_THRESHOLDS, 0)
        if status != 0:
            raise FloatingPointError(
                f"non-finite value in {self.config.method} at iteration {int(sc[K])}")
        new.k = int(sc[K])
        new.cost = int(sc[COST])
        new.weight_sum = float(sc[WSUM])
        new.sum_n = int(sc[SUM_N])
        new.gn_guard_active = bool(sc[GUARD])
        if new.hybrid is not None:
            new.hybrid = replace(hyb, t=int(sc[HT]) + 1, last_zeta=float(sc[LAST_ZETA]))
        if new.diag_accum is not None:
            new.diag_accum = acc[0].copy() if new.diag_accum.ndim == 1 else acc.copy()
        return new

    __call__ = step


def pack_fpar(config: OptimizerConfig) -> np.ndarray:
    st, sa = config.step, config.samples
    return np.array([
        st.eta, st.alpha, st.c,
        sa.n1 if sa is not None else 2.0, sa.q if sa is not None else 0.0,
        config.forget.p if config.forget is not None else 0.0,
        config.adam.beta1, config.adam.beta2, config.adam.eps,
    ], dtype=np.float64)


def make_optimizer(config, problem: McLsProblem) -> Optimizer:
    """Build a stepper from an :class:`OptimizerConfig` or its dict form."""
    if isinstance(config, dict):
        config = OptimizerConfig.from_dict(config)
    return Optimizer(config, problem)


# ---------------------------------------------------- single-method steppers


def _run_one(state, problem, config, rng):
    return Optimizer(config, problem).step(state, rng)


def sgd_step(state: OptimizerState, problem: McLsProblem, schedule: StepSchedule,
             n: int, rng: RunRng) -> OptimizerState:
    """``x <- P(x - a_k D grad_N)`` with the U-statistic over ``n`` fresh pairs."""
    if n < 2:
        raise ValueError("sgd_step needs n >= 2")
    return _run_one(state, problem, OptimizerConfig("sgd", schedule, SampleSchedule(n, 0.0)), rng)


def ip_step(state: OptimizerState, problem: McLsProblem, step: StepSchedule,
            samples: SampleSchedule, rng: RunRng, averaged: bool = False) -> OptimizerState:
    """Increasing-precision step.

    Without averaging the gain is ``eta * N_k / sum_{i<=k} N_i``; the averaged
    variant uses the step schedule and weights the average by ``N_k``.
    """
    cfg = OptimizerConfig("aip" if averaged else "ip", step, samples)
    if averaged and state.x_avg is None:
        state = replace(state.copy(), x_avg=state.x_tilde.copy())
    return _run_one(state, problem, cfg, rng)


def averaged_step(state: OptimizerState, inner_update: Callable[[OptimizerState], OptimizerState],
                  weight: float) -> OptimizerState:
    """Apply ``inner_update`` to the raw iterate, then fold it into the average."""
    if not weight > 0:
        raise ValueError("averaging weight must be > 0")
    inner_in = replace(state.copy(), x=state.x_tilde.copy(), x_avg=None)
    inner = inner_update(inner_in)
    x_new = np.asarray(inner.x_tilde, dtype=np.float64)
    x_avg = np.array(state.x_avg if state.x_avg is not None else x_new, dtype=np.float64)
    wsum = float(_average_into(x_avg, x_new, float(state.weight_sum), float(weight)))
    return replace(inner, x_tilde=x_new.copy(), x_avg=x_avg, weight_sum=wsum, x=x_avg.copy())


def hybrid_sgd_step(state: OptimizerState, problem: McLsProblem, step: StepSchedule,
                    forget: ForgetSchedule, rng: RunRng) -> OptimizerState:
    """One pair, hybrid gradient, ``x <- P(x - a_t D g_t)``."""
    if state.hybrid is None:
        raise ValueError("hybrid_sgd_step needs a hybrid state")
    return _run_one(state, problem, OptimizerConfig("hybrid_sgd", step, forget=forget), rng)


def adagrad_step(state: OptimizerState, g, eta: float, box=None) -> OptimizerState:
    """Diagonal AdaGrad update of ``x`` with a given gradient."""
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient must be finite")
    new = state.copy()
    if new.diag_accum is None:
        new.diag_accum = np.zeros_like(g)
    _adagrad_apply(new.x_tilde, new.diag_accum.reshape(1, -1), g, float(eta))
    if box is not None:
        new.x_tilde = project(new.x_tilde, box)
    new.x = new.x_tilde.copy()
    new.k += 1
    return new


def adam_step(state: OptimizerState, g, alpha_t: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, box=None) -> OptimizerState:
    """Adam update with bias correction; ``state.k`` counts completed steps."""
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient must be finite")
    new = state.copy()
    if new.diag_accum is None:
        new.diag_accum = np.zeros((2, g.shape[0]))
    new.k += 1
    _adam_apply(new.x_tilde, new.diag_accum, g, float(new.k), float(alpha_t),
                float(beta1), float(beta2), float(eps))
    if box is not None:
        new.x_tilde = project(new.x_tilde, box)
    new.x = new.x_tilde.copy()
    return new


def sgn_step(state: OptimizerState, problem: McLsProblem, forget: ForgetSchedule,
             alpha: float, rng: RunRng, eta: float = 1.0) -> OptimizerState:
    """Stochastic Gauss-Newton step ``x <- P(x - B_t^{-1} g_t / t^alpha)``.

    While ``B_t`` fails the factorization/conditioning guard the iterate is
    left in place; the pair is consumed either way.
    """
    if state.hybrid is None:
        raise ValueError("sgn_step needs a hybrid state")
    cfg = OptimizerConfig("sgn", StepSchedule(eta, alpha), forget=forget)
    return _run_one(state, problem, cfg, rng)


def gauss_newton_estimate(state: OptimizerState) -> Optional[np.ndarray]:
    """``B_t`` for the next SGN step from a hybrid state (None before t = 2)."""
    h = state.hybrid
    if h is None or h.t < 2:
        return None
    out = np.empty((h.sum_jtj.shape[0],) * 2)
    _gn_matrix(h.sum_j, h.bar_j, h.sum_jtj, float(h.t), h.last_zeta, out)
    return out


def run_until(optimizer: Optimizer, x0, rng: RunRng, budget: float):
    """Run from ``x0`` until the cost reaches ``budget``; returns ``(x, iterations)``."""
    p = optimizer.problem
    n, m = p.dim_n, p.dim_m
    x = np.ascontiguousarray(optimizer.init_state(x0).x)
    sc = np.zeros(N_SCALARS)
    sc[GUARD] = 1.0
    status, _, _ = _advance(
        p.kernel, p.params, optimizer.code, optimizer.form, optimizer.fpar, optimizer.dmat,
        p.box.lower, p.box.upper, rng.state, rng.spare, x, x.copy(), x.copy(), sc,
        np.zeros(m), np.zeros((m, n)), np.zeros((m, n)), np.zeros((n, n)), np.zeros((2, n)),
        np.iinfo(np.int64).max, float(budget), x, _NO_THRESHOLDS, _NO_THRESHOLDS, 0)
    if status != 0:
        raise FloatingPointError(
            f"non-finite value in {optimizer.config.method} at iteration {int(sc[K])}")
    return x, int(sc[K])
