"""Procedural style families standing in for artist/object image sets.

Parameter ranges (``random_style``):

=============  ===========================  ==========================
parameter      base range                   default per-image jitter
=============  ===========================  ==========================
orientation    [0, pi) rad                  N(0, 0.15) rad
frequency      [2, 6] cycles per image      N(0, 0.3)
phase          [0, 2 pi)                    U(-pi, pi)
contrast       [0.5, 0.9]                   N(0, 0.05), clipped to [0.2, 1]
blob density   [0.3, 1.0] -> 3..7 blobs     positions N(0, 0.15)
=============  ===========================  ==========================

Each image also carries its own content layer: ``content_blobs`` signed
Gaussian bumps (amplitude ``content``, width 0.12) at uniform positions. The
style pattern is shared; the content layer is what makes an image unique.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .metrics import feature_embed
from .tensor_core import Rng, gaussian_sample

KINDS = ("stripes", "checker", "radial", "blobs")


@dataclass(frozen=True)
class StyleSpec:
    kind: str
    orientation: float = 0.0
    frequency: float = 4.0
    contrast: float = 0.8
    blob_density: float = 0.5
    phase: float = 0.0
    orientation_jitter: float = 0.15
    frequency_jitter: float = 0.3
    phase_jitter: float = math.pi
    contrast_jitter: float = 0.05
    position_jitter: float = 0.15
    content: float = 0.5
    content_blobs: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown style kind {self.kind!r}")
        if not 0.0 < self.contrast <= 1.0:
            raise ValueError("contrast must be in (0, 1]")
        if self.frequency <= 0:
            raise ValueError("frequency must be positive")

    def without_jitter(self) -> "StyleSpec":
        return replace(self, orientation_jitter=0.0, frequency_jitter=0.0, phase_jitter=0.0,
                       contrast_jitter=0.0, position_jitter=0.0, content=0.0)


DEFAULT_STYLES = (
    StyleSpec("stripes", orientation=0.3, frequency=3.0, contrast=0.8, seed=101),
    StyleSpec("checker", orientation=0.8, frequency=4.0, contrast=0.7, seed=202),
    StyleSpec("radial", frequency=3.0, contrast=0.8, seed=303),
    StyleSpec("blobs", frequency=4.0, contrast=0.7, blob_density=0.6, seed=404),
    StyleSpec("stripes", orientation=2.0, frequency=5.5, contrast=0.6, seed=505),
)


def default_styles(n: int = 5) -> list[StyleSpec]:
    """The first ``n`` fixed evaluation styles (cycled with shifted seeds past five)."""
    return [replace(DEFAULT_STYLES[i % len(DEFAULT_STYLES)],
                    seed=DEFAULT_STYLES[i % len(DEFAULT_STYLES)].seed + 1000 * (i // len(DEFAULT_STYLES)))
            for i in range(n)]


def random_style(rng: Rng, kind: str | None = None) -> StyleSpec:
    """Draw a style with base parameters in the documented ranges."""
    u = rng.uniform(6)
    if kind is None:
        kind = KINDS[int(rng.integers(0, len(KINDS) - 1))]
    return StyleSpec(
        kind=kind,
        orientation=float(u[0] * math.pi),
        frequency=float(2.0 + 4.0 * u[1]),
        contrast=float(0.5 + 0.4 * u[2]),
        blob_density=float(0.3 + 0.7 * u[3]),
        phase=float(2 * math.pi * u[4]),
        seed=int(rng.integers(0, 2 ** 31 - 1)),
    )


def _coords(size):
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="ij")  # (row, col) in [0, 1)


def _render(spec: StyleSpec, size: int, orient, freq, phase, contrast, centers):
    v, u = _coords(size)
    cu, cv = math.cos(orient), math.sin(orient)
    along = u * cu + v * cv
    across = -u * cv + v * cu
    if spec.kind == "stripes":
        pattern = np.sin(2 * math.pi * freq * along + phase)
    elif spec.kind == "checker":
        s = np.sin(2 * math.pi * freq / 2 * along + phase) * np.sin(2 * math.pi * freq / 2 * across + phase / 2)
        pattern = np.tanh(4.0 * s) / math.tanh(4.0)
    elif spec.kind == "radial":
        cx, cy = centers[0]
        r = np.hypot(u - cx, v - cy)
        pattern = np.sin(2 * math.pi * freq * r + phase)
    else:
        radius = 0.5 / freq + 0.04
        field = np.zeros_like(u)
        for cx, cy in centers:
            field += np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2 * radius ** 2))
        pattern = 2.0 * np.tanh(field) - 1.0
    return np.clip(0.5 + 0.5 * contrast * pattern, 0.0, 1.0)


def _content(size, rng: Rng, amplitude, n):
    if amplitude == 0.0 or n == 0:
        return 0.0
    v, u = _coords(size)
    pos = 0.1 + 0.8 * rng.uniform((n, 2))
    sign = np.where(rng.uniform(n) < 0.5, -1.0, 1.0)
    layer = np.zeros_like(u)
    for (cx, cy), s in zip(pos, sign):
        layer += s * np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2 * 0.12 ** 2))
    return amplitude * layer


def _base_centers(spec: StyleSpec):
    rng = Rng(spec.seed)
    if spec.kind == "radial":
        return 0.3 + 0.4 * rng.uniform((1, 2))
    n = 3 + int(round(4 * min(max(spec.blob_density, 0.0), 1.0)))
    return 0.15 + 0.7 * rng.uniform((n, 2))


def _has_jitter(spec: StyleSpec) -> bool:
    return any((spec.orientation_jitter, spec.frequency_jitter, spec.phase_jitter,
                spec.contrast_jitter, spec.position_jitter, spec.content))


def _draw(spec: StyleSpec, size: int, rng: Rng, base):
    z = gaussian_sample(rng, 4 + base.size)
    ph = rng.uniform()
    orient = spec.orientation + spec.orientation_jitter * z[0]
    freq = max(0.5, spec.frequency + spec.frequency_jitter * z[1])
    contrast = float(np.clip(spec.contrast + spec.contrast_jitter * z[2], 0.2, 1.0))
    phase = spec.phase + spec.phase_jitter * (2.0 * ph - 1.0)
    centers = base + spec.position_jitter * z[4:].reshape(base.shape)
    img = _render(spec, size, orient, freq, phase, contrast, centers)
    return np.clip(img + _content(size, rng, spec.content, spec.content_blobs), 0.0, 1.0)


def gen_style(spec: StyleSpec, n: int = 20, size: int = 32, rng: Rng | None = None,
              distinct: float | None = 0.9, max_redraws: int = 100) -> np.ndarray:
    """``n`` images of one style, each with its own jitter draw. Shape ``(n, size, size)``.

    With jitter enabled, a draw whose feature cosine to an accepted image
    exceeds ``distinct`` is redrawn, so generated sets hold no near-duplicates.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if size < 8 or size % 8:
        raise ValueError(f"size must be a positive multiple of 8, got {size}")
    rng = rng if rng is not None else Rng(spec.seed)
    base = _base_centers(spec)
    check = distinct is not None and _has_jitter(spec)
    out = np.empty((n, size, size))
    feats = []
    for i in range(n):
        for _ in range(max_redraws):
            img = _draw(spec, size, rng, base)
            if not check:
                break
            f = feature_embed(img)
            if not feats or np.max(np.array(feats) @ f) <= distinct:
                feats.append(f)
                break
        else:
            raise RuntimeError(f"could not draw {n} distinct images for style {spec.kind!r}")
        out[i] = img
    return out


def split_membership(images, rng: Rng):
    """Seeded shuffle into (members, holdout); odd counts give the extra image to holdout.

    Returns ``(members, holdout, member_idx, holdout_idx)``.
    """
    n = len(images)
    if n < 2:
        raise ValueError("need at least two images to split")
    perm = rng.permutation(n)
    k = n // 2
    mem_idx, hold_idx = np.sort(perm[:k]), np.sort(perm[k:])
    images = np.asarray(images)
    return images[mem_idx], images[hold_idx], mem_idx, hold_idx
