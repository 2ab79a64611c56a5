import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgidm.metrics import (FEATURE_DIM, ScoreTable, auc, best_of_k, best_threshold_acc, cosine_sim,
                           dedup_filter, feature_cosine, feature_embed, ssim)
from cgidm.tensor_core import Rng


def stripes(vertical: bool, size=16, period=4):
    c = (np.arange(size) // (period // 2)) % 2
    return np.tile(c, (size, 1)).astype(float) if vertical else np.tile(c[:, None], (1, size)).astype(float)


def brute_auc(m, h):
    return sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in m for b in h) / (len(m) * len(h))


def brute_acc(m, h):
    cands = sorted(set(m) | set(h)) + [math.inf]
    best = max(sum(s >= c for s in m) + sum(s < c for s in h) for c in cands)
    return best / (len(m) + len(h))


# features ---------------------------------------------------------------

def test_feature_unit_norm_and_dim():
    f = feature_embed(Rng(0).uniform((16, 16)))
    assert f.shape == (FEATURE_DIM,) == (48,)
    assert np.linalg.norm(f) == pytest.approx(1.0, abs=1e-14)


def test_feature_constant_image():
    f = feature_embed(np.full((8, 8), 0.8))
    assert np.all(f[16:] == 0.0)
    np.testing.assert_allclose(f[:16], np.full(16, 0.25), rtol=1e-14)


def test_feature_all_midgray_is_zero():
    assert not np.any(feature_embed(np.full((8, 8), 0.5)))


def test_feature_pure_and_self_similarity():
    x = Rng(1).uniform((16, 16))
    assert np.array_equal(feature_embed(x), feature_embed(x))
    assert feature_cosine(x, x) == 1.0


def test_feature_stripe_orientation():
    assert feature_cosine(stripes(True), stripes(False)) < 0.9


def test_feature_bad_shape():
    with pytest.raises(ValueError):
        feature_embed(np.zeros((10, 10)))


def test_cosine_examples():
    assert cosine_sim([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0, abs=1e-15)
    assert cosine_sim([1.0, 0.0], [0.0, 3.0]) == 0.0
    assert cosine_sim([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    assert cosine_sim([0.0, 0.0], [1.0, 1.0]) == 0.0
    with pytest.raises(ValueError):
        cosine_sim([1.0], [1.0, 2.0])


# ssim -------------------------------------------------------------------

def test_ssim_identity_and_symmetry():
    r = Rng(2)
    a, b = r.uniform((16, 16)), r.uniform((16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == ssim(b, a)


def test_ssim_constant_images_hand_value():
    # means 0 and 1, no variance: c1 / (1 + c1)
    v = ssim(np.zeros((16, 16)), np.ones((16, 16)))
    assert v == pytest.approx(1e-4 / (1 + 1e-4), rel=1e-12)
    assert v < 0.05


def test_ssim_window_count_oracle():
    # 16x16 with 8x8 windows at stride 4 -> 3x3 windows; check against a loop
    r = Rng(3)
    a, b = r.uniform((16, 16)), r.uniform((16, 16))
    vals = []
    for i in range(0, 9, 4):
        for j in range(0, 9, 4):
            x, y = a[i:i + 8, j:j + 8], b[i:i + 8, j:j + 8]
            mx, my = x.mean(), y.mean()
            cov = ((x - mx) * (y - my)).mean()
            vals.append((2 * mx * my + 1e-4) * (2 * cov + 9e-4)
                        / ((mx ** 2 + my ** 2 + 1e-4) * (x.var() + y.var() + 9e-4)))
    assert ssim(a, b) == pytest.approx(np.mean(vals), rel=1e-12)


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 16)))


# best-of-k --------------------------------------------------------------

def test_best_of_k():
    r = Rng(4)
    target = r.uniform((16, 16))
    cands = [r.uniform((16, 16)) for _ in range(4)]
    assert best_of_k(target, cands + [target]) == 1.0
    assert best_of_k(target, cands[:1]) == feature_cosine(target, cands[0])
    scores = [feature_cosine(target, c) for c in cands]
    assert best_of_k(target, cands) == max(scores) >= np.mean(scores)
    assert best_of_k(target, cands, "ssim") == max(ssim(target, c) for c in cands)
    with pytest.raises(ValueError):
        best_of_k(target, [])


# auc / accuracy ---------------------------------------------------------

def test_auc_examples():
    assert auc([0.9, 0.8], [0.7, 0.85]) == 0.75
    assert auc([3, 4], [1, 2]) == 1.0
    assert auc([1, 2, 2], [2, 1, 2]) == 0.5
    with pytest.raises(ValueError):
        auc([], [1.0])


def _table(mem, hold, classes=None):
    t = ScoreTable("cosine")
    for i, s in enumerate(mem):
        t.add(classes[0] if classes else "a", i, True, s)
    for i, s in enumerate(hold):
        t.add(classes[1] if classes else "a", 100 + i, False, s)
    return t


def test_universal_accuracy_example():
    acc, thr = best_threshold_acc(_table([0.9, 0.8], [0.7, 0.85]), "universal")
    assert acc == 0.75
    assert set(thr) == {"*"}


def test_separated_classes_full_accuracy():
    t = ScoreTable()
    for c, off in (("x", 0.0), ("y", 2.0)):
        for i in range(3):
            t.add(c, i, True, 10.0 + off + i * 0.1)
            t.add(c, 10 + i, False, off + i * 0.1)
    assert best_threshold_acc(t, "universal")[0] == 1.0
    assert best_threshold_acc(t, "per_class")[0] == 1.0


def test_degenerate_class_and_bad_mode():
    t = ScoreTable()
    t.add("a", 0, True, 0.5)
    t.add("a", 1, False, 0.4)
    t.add("b", 0, True, 0.5)
    with pytest.raises(ValueError):
        best_threshold_acc(t)
    with pytest.raises(ValueError):
        best_threshold_acc(_table([1.0], [0.0]), "median")


def test_score_table_rejects_duplicates_and_nan():
    t = ScoreTable()
    t.add("a", 0, True, 0.5)
    with pytest.raises(ValueError):
        t.add("a", 0, False, 0.2)
    with pytest.raises(ValueError):
        t.add("a", 1, False, float("nan"))


_score_lists = st.lists(st.integers(0, 20).map(lambda v: v / 10), min_size=1, max_size=100)


@settings(max_examples=50, deadline=None)
@given(_score_lists, _score_lists)
def test_auc_matches_brute_force(m, h):
    assert auc(m, h) == pytest.approx(brute_auc(m, h), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(_score_lists, _score_lists)
def test_universal_acc_matches_exhaustive_scan(m, h):
    acc, _ = best_threshold_acc(_table(m, h))
    assert acc == pytest.approx(brute_acc(m, h), abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abc"), st.booleans(), st.floats(0, 1)), min_size=6, max_size=60))
def test_per_class_dominates_universal(rows):
    t = ScoreTable()
    for i, (c, m, s) in enumerate(rows):
        t.add(c, i, m, s)
    for c in "abc":
        t.add(c, 1000, True, 0.5)
        t.add(c, 1001, False, 0.5)
    assert best_threshold_acc(t, "per_class")[0] >= best_threshold_acc(t, "universal")[0]


# dedup ------------------------------------------------------------------

def test_dedup_duplicate_pair():
    x = Rng(5).uniform((16, 16))
    kept, idx = dedup_filter([x, x.copy()])
    assert idx == [0] and len(kept) == 1


def test_dedup_keeps_distinct_and_is_idempotent():
    imgs = [stripes(True), stripes(False), Rng(6).uniform((16, 16))]
    kept, idx = dedup_filter(imgs)
    assert idx == [0, 1, 2]
    again, _ = dedup_filter(kept)
    assert len(again) == len(kept)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 1.0))
def test_dedup_postcondition(seed, tau):
    r = Rng(seed)
    base = r.uniform((16, 16))
    imgs = [np.clip(base + 0.3 * r.uniform((16, 16)), 0, 1) for _ in range(8)]
    kept, _ = dedup_filter(imgs, tau)
    f = [feature_embed(k) for k in kept]
    assert all(cosine_sim(f[i], f[j]) <= tau for i in range(len(f)) for j in range(i))
    assert len(dedup_filter(kept, tau)[0]) == len(kept)
