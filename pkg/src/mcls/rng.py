"""Portable per-run random streams.

Every optimization run owns a xoshiro256** generator whose 256-bit state is
filled from a SplitMix64 stream. The SplitMix64 seed is derived from
``(master_seed, run_index)`` so that any run can be replayed in isolation,
independently of how runs are scheduled across workers.

The hot-path primitives (``next_u64``, ``uniform``, ``normal``) are numba
kernels operating on two small arrays: the ``uint64[4]`` generator state and a
``float64[2]`` cache holding the spare variate of the polar method.
"""
from __future__ import annotations

import numba as nb
import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

_U64 = np.uint64
_INV_2_53 = 1.0 / 9007199254740992.0


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state; return ``(new_state, output)``."""
    state = (state + GOLDEN_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def run_seed(master_seed: int, run_index: int) -> int:
    """SplitMix64 seed word for one run."""
    if master_seed < 0 or run_index < 0:
        raise ValueError("master_seed and run_index must be non-negative")
    return (master_seed ^ (run_index * GOLDEN_GAMMA)) & MASK64


@nb.njit(inline="always", cache=True)
def _rotl(x, k):
    return (x << _U64(k)) | (x >> _U64(64 - k))


@nb.njit(cache=True)
def next_u64(s):
    """One xoshiro256** output; mutates ``s`` in place."""
    s0, s1, s2, s3 = s[0], s[1], s[2], s[3]
    result = _rotl(s1 * _U64(5), 7) * _U64(9)
    t = s1 << _U64(17)
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = _rotl(s3, 45)
    s[0] = s0
    s[1] = s1
    s[2] = s2
    s[3] = s3
    return result


@nb.njit(cache=True)
def uniform(s):
    """Uniform double in [0, 1) from the top 53 bits."""
    return (next_u64(s) >> _U64(11)) * _INV_2_53


@nb.njit(cache=True)
def normal(s, spare):
    """Standard normal variate via the Marsaglia polar method.

    Each accepted pair yields two variates; the second is parked in
    ``spare`` (``spare[0]`` flags it, ``spare[1]`` holds it).
    """
    if spare[0] != 0.0:
        spare[0] = 0.0
        return spare[1]
    while True:
        u = 2.0 * uniform(s) - 1.0
        v = 2.0 * uniform(s) - 1.0
        r2 = u * u + v * v
        if r2 > 0.0 and r2 < 1.0:
            break
    f = np.sqrt(-2.0 * np.log(r2) / r2)
    spare[0] = 1.0
    spare[1] = v * f
    return u * f


@nb.njit(cache=True)
def _fill_normal(s, spare, out):
    for i in range(out.shape[0]):
        out[i] = normal(s, spare)


@nb.njit(cache=True)
def _fill_uniform(s, out):
    for i in range(out.shape[0]):
        out[i] = uniform(s)


class RunRng:
    """Single-owner mutable generator for one optimization run."""

    __slots__ = ("state", "spare")

    def __init__(self, state, spare=None):
        self.state = np.asarray(state, dtype=np.uint64).copy()
        if self.state.shape != (4,):
            raise ValueError("xoshiro256** state must have 4 words")
        if not self.state.any():
            raise ValueError("xoshiro256** state must not be all zero")
        self.spare = np.zeros(2) if spare is None else np.array(spare, dtype=np.float64)

    @classmethod
    def from_seed(cls, seed: int) -> "RunRng":
        """Fill the generator state with four SplitMix64 outputs of ``seed``."""
        sm = seed & MASK64
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        return cls(np.array(words, dtype=np.uint64))

    def copy(self) -> "RunRng":
        return RunRng(self.state, self.spare)

    def next_u64(self) -> int:
        return int(next_u64(self.state))

    def uniform(self, size=None):
        if size is None:
            return float(uniform(self.state))
        out = np.empty(size)
        _fill_uniform(self.state, out.reshape(-1))
        return out

    def standard_normal(self, size=None):
        if size is None:
            return float(normal(self.state, self.spare))
        out = np.empty(size)
        _fill_normal(self.state, self.spare, out.reshape(-1))
        return out

    def __repr__(self):
        words = ", ".join(f"0x{int(w):016x}" for w in self.state)
        return f"RunRng([{words}])"


def rng_for_run(master_seed: int, run_index: int) -> RunRng:
    """Deterministic generator for run ``run_index`` of an experiment."""
    return RunRng.from_seed(run_seed(master_seed, run_index))


def standard_normal(rng: RunRng) -> float:
    return rng.standard_normal()
