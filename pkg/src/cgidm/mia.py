"""Membership scores at a fixed timestep: contrasting loss gap vs. plain loss.

Both scores are oriented so that higher means "more likely a member".
"""

from __future__ import annotations

import numpy as np

from .diffusion import NoiseSchedule, ddpm_loss
from .inversion import l_tar
from .metrics import auc
from .tensor_core import Rng, gaussian_sample

METHODS = ("cmia", "naive")


def _noises(x, rng: Rng, n_noise: int):
    if n_noise < 1:
        raise ValueError("n_noise must be >= 1")
    return gaussian_sample(rng, (n_noise, *np.shape(x)))


def cmia_score(theta, theta_prime, x0, t: int, rng: Rng, n_noise: int = 8,
               sched: NoiseSchedule | None = None):
    """Mean loss gap ``L_tar`` over ``n_noise`` noise draws at timestep ``t``.

    ``x0`` may be a batch, giving one score per image.
    """
    sched.check_t(t, 1)
    eps = _noises(x0, rng, n_noise)
    return np.mean([l_tar(theta, theta_prime, x0, t, e, sched) for e in eps], axis=0)


def naive_score(theta_prime, x0, t: int, rng: Rng, n_noise: int = 8,
                sched: NoiseSchedule | None = None):
    """Negative mean denoising loss of the fine-tuned model."""
    sched.check_t(t, 1)
    eps = _noises(x0, rng, n_noise)
    return -np.mean([ddpm_loss(theta_prime, x0, t, e, sched) for e in eps], axis=0)


def mia_sweep(theta, groups, t_list, sched: NoiseSchedule, n_noise: int = 8, seed: int = 0):
    """AUC per (method, t), pooling scores over all groups.

    ``groups`` is a list of ``(theta_prime, members, holdout)``, e.g. one per
    style; a single triple is accepted too. Both methods at the same ``t`` see
    identical noise draws. Returns rows ``(method, t, auc)``.
    """
    if len(groups) == 3 and not isinstance(groups[0], tuple):
        groups = [tuple(groups)]
    rows = []
    for t in t_list:
        scores = {m: ([], []) for m in METHODS}
        for gi, (theta_prime, members, holdout) in enumerate(groups):
            if len(members) == 0 or len(holdout) == 0:
                raise ValueError("each group needs members and holdout images")
            for side, imgs in ((0, members), (1, holdout)):
                s = seed * 1_000_003 + int(t) * 1009 + gi * 2 + side
                scores["cmia"][side].append(
                    np.atleast_1d(cmia_score(theta, theta_prime, np.asarray(imgs), t, Rng(s), n_noise, sched)))
                scores["naive"][side].append(
                    np.atleast_1d(naive_score(theta_prime, np.asarray(imgs), t, Rng(s), n_noise, sched)))
        for m in METHODS:
            rows.append((m, int(t), auc(np.concatenate(scores[m][0]), np.concatenate(scores[m][1]))))
    return rows
