import numpy as np
import pytest

from cgidm.diffusion import ddpm_loss
from cgidm.inversion import l_tar
from cgidm.mia import cmia_score, mia_sweep, naive_score
from cgidm.tensor_core import Rng, gaussian_sample

from conftest import random_model


def test_cmia_antisymmetric(sched):
    a, b = random_model(1, T=sched.T), random_model(2, T=sched.T)
    x = Rng(0).uniform((5, 4, 4))
    s1 = cmia_score(a, b, x, 6, Rng(3), 4, sched)
    s2 = cmia_score(b, a, x, 6, Rng(3), 4, sched)
    np.testing.assert_allclose(s1, -s2, rtol=0, atol=1e-13)
    assert s1.shape == (5,)


def test_single_noise_reduces_to_one_draw(sched):
    a, b = random_model(1, T=sched.T), random_model(2, T=sched.T)
    x = Rng(0).uniform((4, 4))
    eps = gaussian_sample(Rng(3), (1, 4, 4))[0]
    assert cmia_score(a, b, x, 6, Rng(3), 1, sched) == pytest.approx(l_tar(a, b, x, 6, eps, sched), abs=1e-13)
    assert naive_score(b, x, 6, Rng(3), 1, sched) == pytest.approx(-ddpm_loss(b, x, 6, eps, sched), abs=1e-13)


def test_validation(sched):
    a = random_model(1, T=sched.T)
    x = np.zeros((4, 4))
    with pytest.raises(ValueError):
        cmia_score(a, a, x, 0, Rng(0), 2, sched)
    with pytest.raises(ValueError):
        naive_score(a, x, sched.T + 1, Rng(0), 2, sched)
    with pytest.raises(ValueError):
        cmia_score(a, a, x, 3, Rng(0), 0, sched)
    with pytest.raises(ValueError):
        mia_sweep(a, (a, np.zeros((0, 4, 4)), np.zeros((2, 4, 4))), [3], sched)


def test_identical_models_chance(sched):
    a = random_model(1, T=sched.T)
    r = Rng(5)
    mem, hold = r.uniform((100, 4, 4)), r.uniform((100, 4, 4))
    rows = dict(((m, t), v) for m, t, v in mia_sweep(a, (a, mem, hold), [5, 15], sched, n_noise=2))
    for (m, t), v in rows.items():
        assert abs(v - 0.5) <= 0.1, (m, t, v)
    assert rows[("cmia", 5)] == 0.5


def test_sweep_detects_memorization(latent_world):
    s, ae, th, tp, mem, hold = latent_world
    rows = mia_sweep(th, [(tp, ae.encode(mem), ae.encode(hold))], [10, 30, 50], s, n_noise=8, seed=1)
    assert [(m, t) for m, t, _ in rows] == [(m, t) for t in (10, 30, 50) for m in ("cmia", "naive")]
    assert all(v > 0.5 for _, _, v in rows)


def test_sweep_deterministic(sched):
    a, b = random_model(1, T=sched.T), random_model(2, T=sched.T)
    x = Rng(0).uniform((6, 4, 4))
    g = (b, x[:3], x[3:])
    assert mia_sweep(a, g, [4, 9], sched, 3, 7) == mia_sweep(a, g, [4, 9], sched, 3, 7)
