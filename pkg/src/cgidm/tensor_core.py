"""Seeded randomness and small array helpers shared by every stage.

Grids are plain ``numpy.float64`` arrays. Uniform variates come from numpy's
PCG64 bit generator; normals are produced from those uniforms with the
Box-Muller transform so the Gaussian stream is a documented function of the
uniform stream.
"""

from __future__ import annotations

import math

import numpy as np


def box_muller(u1, u2):
    """Map uniforms ``u1`` in (0, 1] and ``u2`` in [0, 1) to two standard normals."""
    u1 = np.asarray(u1, dtype=np.float64)
    u2 = np.asarray(u2, dtype=np.float64)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * math.pi * u2
    return r * np.cos(theta), r * np.sin(theta)


def split_seed(seed: int, index: int) -> int:
    """Seed for the ``index``-th parallel task derived from ``seed``."""
    return (int(seed) ^ int(index)) & 0xFFFFFFFFFFFFFFFF


class Rng:
    """Single-owner PCG64 stream.

    Not thread safe. Derive one per worker with :meth:`split`.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bitgen = np.random.PCG64(self.seed)
        self._gen = np.random.Generator(self._bitgen)

    @property
    def state(self) -> dict:
        return self._bitgen.state

    def split(self, index: int) -> "Rng":
        return Rng(split_seed(self.seed, index))

    def uniform(self, size=None) -> np.ndarray:
        """Uniform doubles on [0, 1)."""
        return self._gen.random(size)

    def integers(self, lo: int, hi: int, size=None):
        """Uniform integers on [lo, hi] inclusive."""
        return self._gen.integers(lo, hi, size=size, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``."""
        return self._gen.choice(n, size=k, replace=False)


def gaussian_sample(rng: Rng, shape) -> np.ndarray:
    """I.i.d. standard normal grid of ``shape`` via Box-Muller.

    Raises:
        ValueError: if the shape is empty or has a zero/negative dimension.
    """
    shape = tuple(int(d) for d in np.atleast_1d(shape))
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ValueError(f"invalid shape {shape}")
    n = math.prod(shape)
    pairs = (n + 1) // 2
    u = rng.uniform(2 * pairs)
    z1, z2 = box_muller(1.0 - u[:pairs], u[pairs:])
    out = np.empty(2 * pairs)
    out[0::2] = z1
    out[1::2] = z2
    return out[:n].reshape(shape)


def uniform_timestep(rng: Rng, lo: int, hi: int, size=None):
    """Integer timestep uniform on [lo, hi]; an array when ``size`` is given."""
    if lo < 1 or lo > hi:
        raise ValueError(f"need 1 <= lo <= hi, got lo={lo}, hi={hi}")
    out = rng.integers(lo, hi, size=size)
    return int(out) if size is None else out


def l2_norm(g) -> float:
    return float(np.sqrt(np.sum(np.square(g))))


def l2_norm_rows(g: np.ndarray) -> np.ndarray:
    """Per-sample L2 norm over all but the leading axis."""
    g = np.asarray(g)
    return np.sqrt(np.sum(np.square(g.reshape(g.shape[0], -1)), axis=1))


def check_finite(x, what: str = "array") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x
