"""Contrasting gradient inversion and its single-model control.

The contrasting objective for an image ``x`` at timestep ``t`` with noise ``eps`` is

    L_tar = ||eps - eps_theta(x_t, t)||^2 - ||eps - eps_theta'(x_t, t)||^2,
    x_t   = sqrt(a_t) x + sqrt(1 - a_t) eps,

i.e. how much better the fine-tuned model ``theta'`` predicts the noise than the
pretrained ``theta``. Inversion is L2-constrained PGD ascent on a one-sample
Monte-Carlo estimate of its gradient, starting from the masked image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, _ct, forward_diffuse
from .neural_net import AutoEncoder, NoisePredictor
from .tensor_core import Rng, gaussian_sample, l2_norm_rows, split_seed

STEP_BUDGET_RATIO = 2.0 / 70.0  # step length / budget


@dataclass
class InversionConfig:
    N: int = 1000
    step_len: float = 2.0
    budget: float = 70.0
    t_lo: int = 1
    t_hi: int | None = None  # None: schedule T
    seed: int = 0
    keep_ct_coefficients: bool = False

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.step_len <= 0 or self.budget <= 0:
            raise ValueError("step length and budget must be positive")
        if self.t_lo < 1 or (self.t_hi is not None and self.t_hi < self.t_lo):
            raise ValueError("need 1 <= t_lo <= t_hi")

    @classmethod
    def from_budget(cls, budget: float, **kw) -> "InversionConfig":
        """Config whose step length keeps the default step/budget ratio."""
        return cls(step_len=budget * STEP_BUDGET_RATIO, budget=budget, **kw)

    def t_range(self, sched: NoiseSchedule):
        hi = sched.T if self.t_hi is None else self.t_hi
        if self.keep_ct_coefficients:
            hi = min(hi, sched.T - 1)
        if hi > sched.T or self.t_lo > hi:
            raise ValueError(f"timestep range [{self.t_lo}, {hi}] invalid for T={sched.T}")
        return self.t_lo, hi


@dataclass
class InversionTrace:
    """Per-step records; arrays are shaped (N, batch)."""

    t: np.ndarray
    l_tar: np.ndarray
    drift: np.ndarray
    skipped: np.ndarray
    final: np.ndarray = field(repr=False)

    def rows(self, image: int = 0):
        """CSV rows (step, t, l_tar, drift_norm) for one image of the batch."""
        return [(i, int(self.t[i, image]), float(self.l_tar[i, image]), float(self.drift[i, image]))
                for i in range(len(self.t))]


def _batched(x, model: NoisePredictor):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == model.image_shape:
        return x[None], False
    if x.shape[1:] != model.image_shape:
        raise ValueError(f"image shape {x.shape} does not match model shape {model.image_shape}")
    return x, True


def _ct_sq(t, sched):
    t = np.atleast_1d(t)
    return np.array([_ct(sched.alpha_cum[k], sched.alpha_cum[k + 1]) ** 2 for k in t])


def _loss_and_grad(model, x_t, t, eps, sign):
    """``sign * ||eps - model(x_t)||^2`` per sample and its gradient w.r.t. ``x_t``."""
    out, cache = model.forward(x_t, t)
    r = out - eps
    loss = np.sum(np.square(r.reshape(len(r), -1)), axis=1)
    _, g = model.backward(cache, sign * 2.0 * r, param_grads=False)
    return sign * loss, g


def l_tar(theta, theta_prime, x, t, eps, sched: NoiseSchedule, keep_ct: bool = False):
    """Loss difference (pretrained minus fine-tuned); one value per sample for a batch."""
    xb, batched = _batched(x, theta)
    eb = np.asarray(eps, dtype=np.float64).reshape(xb.shape)
    tb = np.broadcast_to(np.asarray(t), (len(xb),))
    x_t = forward_diffuse(xb, tb, eb, sched)
    r1 = eb - theta(x_t, tb)
    r2 = eb - theta_prime(x_t, tb)
    val = (np.sum(np.square(r1.reshape(len(xb), -1)), axis=1)
           - np.sum(np.square(r2.reshape(len(xb), -1)), axis=1))
    if keep_ct:
        val = val * _ct_sq(tb, sched)
    return val if batched else float(val[0])


def l_tar_with_grad(theta, theta_prime, x, t, eps, sched: NoiseSchedule, keep_ct: bool = False):
    """``(L_tar, dL_tar/dx)`` through the forward diffusion and both networks."""
    xb, batched = _batched(x, theta)
    eb = np.asarray(eps, dtype=np.float64).reshape(xb.shape)
    tb = np.broadcast_to(np.asarray(t), (len(xb),))
    x_t = forward_diffuse(xb, tb, eb, sched)
    l1, g1 = _loss_and_grad(theta, x_t, tb, eb, 1.0)
    l2, g2 = _loss_and_grad(theta_prime, x_t, tb, eb, -1.0)
    val = l1 + l2
    grad = (g1 + g2) * np.sqrt(sched.alpha_cum[tb]).reshape(-1, *([1] * (xb.ndim - 1)))
    if keep_ct:
        c2 = _ct_sq(tb, sched)
        val = val * c2
        grad = grad * c2.reshape(grad.shape[:1] + (1,) * (grad.ndim - 1))
    if not batched:
        return float(val[0]), grad[0]
    return val, grad


def l_tar_grad(theta, theta_prime, x, t, eps, sched: NoiseSchedule, keep_ct: bool = False):
    return l_tar_with_grad(theta, theta_prime, x, t, eps, sched, keep_ct)[1]


def denoise_loss_with_grad(model, x, t, eps, sched: NoiseSchedule):
    """``(||eps - eps_theta(x_t, t)||^2, gradient w.r.t. x)`` for a single model."""
    xb, batched = _batched(x, model)
    eb = np.asarray(eps, dtype=np.float64).reshape(xb.shape)
    tb = np.broadcast_to(np.asarray(t), (len(xb),))
    x_t = forward_diffuse(xb, tb, eb, sched)
    val, g = _loss_and_grad(model, x_t, tb, eb, 1.0)
    grad = g * np.sqrt(sched.alpha_cum[tb]).reshape(-1, *([1] * (xb.ndim - 1)))
    return (val, grad) if batched else (float(val[0]), grad[0])


def project_l2(x, center, radius: float):
    """Radially rescale ``x - center`` onto the L2 ball of ``radius``.

    Arrays with three or more axes are treated as batches of 2-D grids and
    projected per sample.
    """
    x = np.asarray(x, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    d = x - center
    db = d.reshape(len(d), -1) if d.ndim >= 3 else d.reshape(1, -1)
    norms = np.sqrt(np.sum(db * db, axis=1))
    scale = np.where(norms > radius, radius / np.where(norms > 0, norms, 1.0), 1.0)
    return center + (db * scale[:, None]).reshape(d.shape)


def _pgd(objective, x_bar, cfg: InversionConfig, sched: NoiseSchedule, ascent: bool,
         image_ids=None):
    """Shared PGD loop; ``objective(x, t, eps) -> (values, grads)`` on batches."""
    x0 = np.array(x_bar, dtype=np.float64)
    t_lo, t_hi = cfg.t_range(sched)
    b = len(x0)
    ids = range(b) if image_ids is None else image_ids
    rngs = [Rng(split_seed(cfg.seed, int(i))) for i in ids]
    x = x0.copy()
    t_log = np.zeros((cfg.N, b), dtype=np.int64)
    val_log = np.zeros((cfg.N, b))
    drift_log = np.zeros((cfg.N, b))
    skipped = np.zeros((cfg.N, b), dtype=bool)
    sign = 1.0 if ascent else -1.0
    shape = x0.shape[1:]
    for i in range(cfg.N):
        t = np.array([r.integers(t_lo, t_hi) for r in rngs])
        eps = np.stack([gaussian_sample(r, shape) for r in rngs])
        vals, g = objective(x, t, eps)
        if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(g))):
            raise FloatingPointError(f"non-finite objective or gradient at step {i}")
        gn = l2_norm_rows(g)
        zero = gn == 0.0
        step = sign * cfg.step_len * g / np.where(zero, 1.0, gn).reshape(-1, *([1] * len(shape)))
        step[zero] = 0.0
        x = project_l2(x + step, x0, cfg.budget)
        t_log[i], val_log[i], skipped[i] = t, vals, zero
        drift_log[i] = l2_norm_rows(x - x0)
    return x, InversionTrace(t_log, val_log, drift_log, skipped, np.clip(x, 0.0, 1.0))


def cgi_dm(theta: NoisePredictor, theta_prime: NoisePredictor, x_bar, cfg: InversionConfig,
           sched: NoiseSchedule, image_ids=None):
    """Recover detail removed from ``x_bar`` by ascending the contrasting objective.

    ``x_bar`` is one image or a batch; each image draws its timesteps and noise
    from its own stream seeded by ``(cfg.seed, image id)``. Returns the final
    images clamped to [0, 1] and the trace.
    """
    xb, batched = _batched(x_bar, theta)
    if theta_prime.image_shape != theta.image_shape:
        raise ValueError("model shapes differ")

    def objective(x, t, eps):
        return l_tar_with_grad(theta, theta_prime, x, t, eps, sched, cfg.keep_ct_coefficients)

    _, trace = _pgd(objective, xb, cfg, sched, ascent=True, image_ids=image_ids)
    return (trace.final if batched else trace.final[0]), trace


def direct_gi(theta_prime: NoisePredictor, x_bar, cfg: InversionConfig, sched: NoiseSchedule,
              image_ids=None):
    """Single-model control: PGD descent on the fine-tuned denoising loss."""
    xb, batched = _batched(x_bar, theta_prime)

    def objective(x, t, eps):
        return denoise_loss_with_grad(theta_prime, x, t, eps, sched)

    _, trace = _pgd(objective, xb, cfg, sched, ascent=False, image_ids=image_ids)
    return (trace.final if batched else trace.final[0]), trace


def cgi_dm_latent(theta: NoisePredictor, theta_prime: NoisePredictor, ae: AutoEncoder, x_bar,
                  cfg: InversionConfig, sched: NoiseSchedule, image_ids=None):
    """Run the contrasting inversion on ``encode(x_bar)`` and decode the result.

    Step length and budget are measured on latents.
    """
    if theta.image_shape != ae.latent_shape or theta_prime.image_shape != ae.latent_shape:
        raise ValueError(f"models operate on {theta.image_shape}, autoencoder latent is {ae.latent_shape}")
    x_bar = np.asarray(x_bar, dtype=np.float64)
    batched = x_bar.shape != ae.image_shape
    z_bar = ae.encode(x_bar if batched else x_bar[None])

    def objective(z, t, eps):
        return l_tar_with_grad(theta, theta_prime, z, t, eps, sched, cfg.keep_ct_coefficients)

    z, trace = _pgd(objective, z_bar, cfg, sched, ascent=True, image_ids=image_ids)
    out = ae.decode(z)
    return (out if batched else out[0]), trace


def default_budget(originals, masked) -> float:
    """Mean L2 distance between masked and original images."""
    d = np.asarray(originals, dtype=np.float64) - np.asarray(masked, dtype=np.float64)
    return float(np.mean(l2_norm_rows(d)))


def gaussian_log_density(x, mu, sigma: float) -> float:
    """Log density of ``N(mu, sigma^2 I)`` at ``x``."""
    x = np.ravel(x)
    d = x.size
    return float(-0.5 * np.sum((x - np.ravel(mu)) ** 2) / sigma ** 2
                 - d * math.log(sigma) - 0.5 * d * math.log(2 * math.pi))
