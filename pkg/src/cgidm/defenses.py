"""Training-time augmentations used as membership defenses.

They only ever act on the view fed to the optimizer; stored datasets are not touched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import Rng, gaussian_sample

KINDS = ("hflip", "cutout", "rand_lite")
RAND_LITE_OPS = ("hflip", "cutout", "brightness", "noise")


@dataclass(frozen=True)
class Defense:
    kind: str
    n_ops: int = 2  # ops drawn per image by rand_lite
    brightness: float = 0.2
    noise_sigma: float = 0.05

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown defense {self.kind!r}; expected one of {KINDS}")

    def apply(self, img: np.ndarray, rng: Rng) -> np.ndarray:
        if self.kind == "hflip":
            return hflip(img, rng)
        if self.kind == "cutout":
            return cutout(img, rng)
        return rand_lite(img, rng, self.n_ops, self.brightness, self.noise_sigma)


def hflip(img, rng: Rng, p: float = 0.5):
    return img[:, ::-1].copy() if rng.uniform() < p else img.copy()


def cutout(img, rng: Rng, block: int | None = None, fill: float = 0.0):
    """Blank one square of side ``image_side // 8`` at a random position."""
    h, w = img.shape
    block = block or max(1, min(h, w) // 8)
    r = int(rng.integers(0, h - block))
    c = int(rng.integers(0, w - block))
    out = img.copy()
    out[r:r + block, c:c + block] = fill
    return out


def rand_lite(img, rng: Rng, n_ops: int = 2, brightness: float = 0.2, noise_sigma: float = 0.05):
    """Apply ``n_ops`` distinct ops from {hflip, cutout, brightness, noise}."""
    out = img
    for i in rng.choice(len(RAND_LITE_OPS), n_ops):
        op = RAND_LITE_OPS[i]
        if op == "hflip":
            out = out[:, ::-1].copy()
        elif op == "cutout":
            out = cutout(out, rng)
        elif op == "brightness":
            out = np.clip(out + rng.uniform() * 2 * brightness - brightness, 0.0, 1.0)
        else:
            out = np.clip(out + noise_sigma * gaussian_sample(rng, out.shape), 0.0, 1.0)
    return out


def parse_defenses(names) -> list[Defense]:
    if isinstance(names, str):
        names = [n.strip() for n in names.split(",")]
    return [Defense(n) for n in names if n and n != "none"]


def augment(img, defenses, rng: Rng):
    for d in defenses:
        img = d.apply(img, rng)
    return img
