"""Partial-information removal: blur, right-half mask, random blockwise mask."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor_core import Rng, split_seed

KINDS = ("blur", "half", "blockwise")


@dataclass
class MaskSpec:
    kind: str = "blockwise"
    block: int = 4
    fraction: float = 0.5
    fill: float = 0.5
    kernel: int | None = None  # blur kernel size; None scales with the image
    sigma: float | None = None
    seed: int = 0
    selection: str = "random"  # or "checkerboard"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if not 0.0 < self.fraction < 1.0:
            raise ValueError("fraction must be in (0, 1)")
        if self.selection not in ("random", "checkerboard"):
            raise ValueError(f"unknown block selection {self.selection!r}")

    def for_image(self, index: int) -> "MaskSpec":
        """Copy with the seed split for the ``index``-th image."""
        return MaskSpec(**{**self.__dict__, "seed": split_seed(self.seed, index)})


def blur_params(side: int, kernel: int | None = None, sigma: float | None = None):
    """Default kernel ``side/4`` (made odd), sigma ``kernel/2.3``."""
    if kernel is None:
        kernel = max(3, side // 4)
        if kernel % 2 == 0:
            kernel += 1
    if sigma is None:
        sigma = kernel / 2.3
    return kernel, sigma


def remove_partial(x0, spec: MaskSpec):
    """Return ``(x_bar, removed)`` with ``removed == 1`` where information was taken out."""
    x0 = np.asarray(x0, dtype=np.float64)
    h, w = x0.shape
    if spec.kind == "blur":
        kernel, sigma = blur_params(min(h, w), spec.kernel, spec.sigma)
        radius = kernel // 2
        x_bar = gaussian_filter(x0, sigma, mode="reflect", truncate=radius / sigma)
        return x_bar, np.ones_like(x0)
    removed = np.zeros_like(x0)
    if spec.kind == "half":
        removed[:, w - w // 2:] = 1.0
    else:
        b = spec.block
        if b < 1 or h % b or w % b:
            raise ValueError(f"block size {b} does not divide image shape {x0.shape}")
        nr, nc = h // b, w // b
        n_blocks = nr * nc
        k = math.ceil(n_blocks * spec.fraction)
        if spec.selection == "random":
            chosen = Rng(spec.seed).choice(n_blocks, k)
        else:
            order = sorted(range(n_blocks), key=lambda i: ((i // nc + i % nc) % 2, i))
            chosen = order[:k]
        for i in chosen:
            r, c = divmod(int(i), nc)
            removed[r * b:(r + 1) * b, c * b:(c + 1) * b] = 1.0
    x_bar = np.where(removed == 1.0, spec.fill, x0)
    return x_bar, removed


def remove_partial_batch(images, spec: MaskSpec, image_ids=None):
    """Mask each image with a per-image seed; returns stacked (x_bar, removed)."""
    image_ids = range(len(images)) if image_ids is None else image_ids
    pairs = [remove_partial(img, spec.for_image(i)) for img, i in zip(images, image_ids)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
