"""Problem abstraction: stochastic residual/Jacobian oracles on a box."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numba as nb
import numpy as np

from .rng import RunRng


class SamplePair(NamedTuple):
    """One joint draw of the residual estimate (m,) and Jacobian estimate (m, n)."""

    qhat: np.ndarray
    jhat: np.ndarray


@dataclass(frozen=True)
class BoxConstraints:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    @classmethod
    def unbounded(cls, n: int) -> "BoxConstraints":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))


@dataclass(frozen=True)
class ReferenceSolution:
    """Known (or numerically computed) solution and its Gauss-Newton matrix.

    ``precond`` approximates the Hessian at ``x_star``; Hessian-preconditioned
    methods use its inverse as the step preconditioner.

    ``hessian`` is the full Hessian of the objective at ``x_star`` when it
    is known to differ from ``precond``.
    """

    x_star: np.ndarray
    precond: np.ndarray
    hessian: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.asarray(self.x_star, dtype=np.float64)
        p = np.asarray(self.precond, dtype=np.float64)
        if p.shape != (x.shape[0], x.shape[0]):
            raise ValueError("precond must be n x n")
        if not np.allclose(p, p.T, rtol=1e-12, atol=0.0):
            raise ValueError("precond must be symmetric")
        object.__setattr__(self, "x_star", x)
        object.__setattr__(self, "precond", p)
        if self.hessian is not None:
            object.__setattr__(self, "hessian", np.asarray(self.hessian, dtype=np.float64))

    @property
    def s_matrix(self) -> np.ndarray:
        return self.precond if self.hessian is None else self.hessian


@nb.njit(inline="always", cache=True)
def project_into(x, lo, hi):
    for i in range(x.shape[0]):
        if x[i] < lo[i]:
            x[i] = lo[i]
        elif x[i] > hi[i]:
            x[i] = hi[i]


def project(x, box: BoxConstraints) -> np.ndarray:
    """Euclidean projection onto the box (componentwise clamp)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != box.lower.shape:
        raise ValueError(f"point has shape {x.shape}, box has dimension {box.dim}")
    return np.minimum(np.maximum(x, box.lower), box.upper)


class McLsProblem:
    """Base class for Monte Carlo least-squares problems.

    Subclasses provide a numba sampler kernel with the signature
    ``kernel(params, x, state, spare, q_out, j_out)`` that writes one
    :class:`SamplePair` into the output buffers, plus the flat float64
    ``params`` array the kernel reads. The same kernel drives both
    :meth:`sample` and the compiled experiment loops.
    """

    name = "abstract"
    kernel = None

    def __init__(self, dim_n: int, dim_m: int, box: Optional[BoxConstraints] = None,
                 reference: Optional[ReferenceSolution] = None, params=None):
        if dim_n < 1 or dim_m < 1:
            raise ValueError("problem dimensions must be positive")
        self.dim_n = int(dim_n)
        self.dim_m = int(dim_m)
        self.box = box if box is not None else BoxConstraints.unbounded(dim_n)
        if self.box.dim != self.dim_n:
            raise ValueError("box dimension does not match dim_n")
        self.reference = reference
        self.params = np.ascontiguousarray(
            np.zeros(1) if params is None else params, dtype=np.float64
        )

    def sample(self, x, rng: RunRng) -> SamplePair:
        x = np.ascontiguousarray(x, dtype=np.float64)
        q = np.empty(self.dim_m)
        j = np.empty((self.dim_m, self.dim_n))
        self.kernel(self.params, x, rng.state, rng.spare, q, j)
        return SamplePair(q, j)

    def sample_many(self, x, count: int, rng: RunRng) -> tuple[np.ndarray, np.ndarray]:
        """``count`` independent pairs stacked as (count, m) and (count, m, n)."""
        x = np.ascontiguousarray(x, dtype=np.float64)
        qs = np.empty((count, self.dim_m))
        js = np.empty((count, self.dim_m, self.dim_n))
        _sample_many(self.kernel, self.params, x, rng.state, rng.spare, qs, js)
        return qs, js

    def initial_point(self, rng: RunRng) -> np.ndarray:
        """Starting iterate; default is a uniform draw in a bounded box."""
        lo, hi = self.box.lower, self.box.upper
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("default initial point needs a bounded box")
        return lo + (hi - lo) * rng.uniform(self.dim_n)

    def describe(self) -> dict:
        return {"name": self.name, "n": self.dim_n, "m": self.dim_m}


@nb.njit(cache=True)
def _sample_many(kernel, params, x, s, spare, qs, js):
    for k in range(qs.shape[0]):
        kernel(params, x, s, spare, qs[k], js[k])
