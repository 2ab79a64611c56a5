"""Image similarity, membership scoring metrics and near-duplicate filtering."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

N_POOL = 4
N_BINS = 8
FEATURE_DIM = N_POOL * N_POOL + 4 * N_BINS
MID_GRAY = 0.5


def _gradients(img):
    """Central differences with reflect boundary (edge pixel mirrored about itself)."""
    p = np.pad(img, 1, mode="reflect")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    return gx, gy


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def feature_embed(img) -> np.ndarray:
    """48-dim handcrafted descriptor of a grayscale image.

    16 values: 4x4 average-pooled intensity minus mid-gray. 32 values: per
    quadrant, an 8-bin histogram of gradient direction weighted by gradient
    magnitude. Each part is scaled to unit norm, then the concatenation is
    scaled to unit norm, so both parts carry equal weight.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] % N_POOL or img.shape[1] % N_POOL:
        raise ValueError(f"image sides must be divisible by {N_POOL}, got {img.shape}")
    h, w = img.shape
    pooled = img.reshape(N_POOL, h // N_POOL, N_POOL, w // N_POOL).mean(axis=(1, 3)).ravel()
    pooled = pooled - MID_GRAY
    gx, gy = _gradients(img)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    bins = np.minimum((ang / (2 * np.pi) * N_BINS).astype(int), N_BINS - 1)
    hist = []
    for rows in (slice(0, h // 2), slice(h // 2, h)):
        for cols in (slice(0, w // 2), slice(w // 2, w)):
            hist.append(np.bincount(bins[rows, cols].ravel(), weights=mag[rows, cols].ravel(),
                                    minlength=N_BINS))
    hist = np.concatenate(hist)
    return _unit(np.concatenate([_unit(pooled), _unit(hist)]))


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def feature_cosine(a, b) -> float:
    """Cosine similarity of two images in feature space."""
    return cosine_sim(feature_embed(a), feature_embed(b))


def ssim(a, b, window: int = 8, stride: int = 4, c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> float:
    """Mean single-scale SSIM over square windows (uniform weights, population moments)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    win = min(window, *a.shape)
    wa = np.lib.stride_tricks.sliding_window_view(a, (win, win))[::stride, ::stride]
    wb = np.lib.stride_tricks.sliding_window_view(b, (win, win))[::stride, ::stride]
    mu_a = wa.mean(axis=(2, 3))
    mu_b = wb.mean(axis=(2, 3))
    var_a = wa.var(axis=(2, 3))
    var_b = wb.var(axis=(2, 3))
    cov = (wa * wb).mean(axis=(2, 3)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


METRICS = {"cosine": feature_cosine, "ssim": ssim}


def get_metric(metric):
    if callable(metric):
        return metric
    try:
        return METRICS[metric]
    except KeyError:
        raise ValueError(f"unknown metric {metric!r}; expected one of {sorted(METRICS)}") from None


def best_of_k(target, candidates, metric="cosine") -> float:
    """Highest similarity between ``target`` and any candidate."""
    if len(candidates) == 0:
        raise ValueError("best_of_k needs at least one candidate")
    fn = get_metric(metric)
    return max(fn(target, c) for c in candidates)


def auc(member_scores, holdout_scores) -> float:
    """P(member score > holdout score), ties counted 1/2 (Mann-Whitney form)."""
    m = np.asarray(member_scores, dtype=np.float64).ravel()
    h = np.asarray(holdout_scores, dtype=np.float64).ravel()
    if m.size == 0 or h.size == 0:
        raise ValueError("AUC needs nonempty member and holdout scores")
    ranks = rankdata(np.concatenate([m, h]))
    u = ranks[:m.size].sum() - m.size * (m.size + 1) / 2.0
    return float(u / (m.size * h.size))


@dataclass
class ScoreTable:
    """Rows of (class id, image id, is_member, score) for one metric channel."""

    metric: str = "cosine"
    rows: list = field(default_factory=list)

    def add(self, class_id, image_id, is_member: bool, score: float) -> None:
        if not np.isfinite(score):
            raise ValueError(f"non-finite score for {class_id}/{image_id}")
        if any(r[0] == class_id and r[1] == image_id for r in self.rows):
            raise ValueError(f"duplicate row {class_id}/{image_id}")
        self.rows.append((class_id, image_id, bool(is_member), float(score)))

    def scores(self, class_id=None):
        rows = [r for r in self.rows if class_id is None or r[0] == class_id]
        mem = np.array([r[3] for r in rows if r[2]])
        hold = np.array([r[3] for r in rows if not r[2]])
        return mem, hold

    @property
    def classes(self) -> list:
        return sorted({r[0] for r in self.rows}, key=str)

    def auc(self) -> float:
        return auc(*self.scores())

    def to_rows(self):
        return [(c, i, int(m), s) for c, i, m, s in self.rows]


def _best_threshold(mem, hold):
    """(correct count, threshold) maximizing accuracy of ``score >= threshold`` => member."""
    scores = np.unique(np.concatenate([mem, hold]))
    cands = np.concatenate([[-np.inf], (scores[:-1] + scores[1:]) / 2.0, [np.inf]])
    correct = ((mem[None, :] >= cands[:, None]).sum(axis=1)
               + (hold[None, :] < cands[:, None]).sum(axis=1))
    i = int(np.argmax(correct))
    return int(correct[i]), float(cands[i])


def best_threshold_acc(table: ScoreTable, mode: str = "universal"):
    """Accuracy at the best threshold: one shared threshold or one per class.

    Returns ``(accuracy, thresholds)`` where thresholds maps class id (or
    ``"*"`` for universal) to the chosen cutoff.
    """
    for c in table.classes:
        mem, hold = table.scores(c)
        if mem.size == 0 or hold.size == 0:
            raise ValueError(f"class {c!r} needs at least one member and one holdout")
    if mode == "universal":
        mem, hold = table.scores()
        correct, thr = _best_threshold(mem, hold)
        return correct / (mem.size + hold.size), {"*": thr}
    if mode != "per_class":
        raise ValueError(f"unknown threshold mode {mode!r}")
    total, correct, thresholds = 0, 0, {}
    for c in table.classes:
        mem, hold = table.scores(c)
        k, thr = _best_threshold(mem, hold)
        correct += k
        total += mem.size + hold.size
        thresholds[c] = thr
    return correct / total, thresholds


def dedup_filter(images, tau: float = 0.90):
    """Greedy near-duplicate removal; returns (kept images, kept indices)."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must be in (0, 1]")
    kept, idx, feats = [], [], []
    for i, img in enumerate(images):
        f = feature_embed(img)
        if all(cosine_sim(f, g) <= tau for g in feats):
            kept.append(img)
            idx.append(i)
            feats.append(f)
    return kept, idx
