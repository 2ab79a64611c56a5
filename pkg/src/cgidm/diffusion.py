"""Noise schedule, training, sampling and the generation baselines.

Schedule arrays are indexed directly by timestep: slot 0 is the clean-image
convention (``alpha_cum[0] == 1``) and slots 1..T are the diffusion steps.
``alpha_cum`` is the cumulative product of ``1 - beta``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .defenses import Defense, augment
from .neural_net import Adam, NoisePredictor
from .tensor_core import Rng, gaussian_sample

log = logging.getLogger(__name__)

FINETUNE_MODES = ("full_no_prior", "full_with_prior", "lora")
KNOWN_STREAM = 0x1A7E


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_cum: np.ndarray
    sigma2: np.ndarray

    def check_t(self, t, lo: int = 0, hi: int | None = None):
        hi = self.T if hi is None else hi
        t = np.asarray(t)
        if t.dtype.kind not in "iu" or np.any(t < lo) or np.any(t > hi):
            raise ValueError(f"timestep must be an integer in [{lo}, {hi}], got {t}")
        return t


def build_schedule(T: int = 100, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule; ``sigma2[t] = beta[t+1]`` (last slot repeats ``beta[T]``)."""
    if T < 2:
        raise ValueError("T must be at least 2")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.concatenate([[0.0], np.linspace(beta_min, beta_max, T)])
    alpha_cum = np.cumprod(1.0 - beta)
    sigma2 = np.concatenate([beta[1:], [beta[T]]])
    return NoiseSchedule(T, beta, alpha_cum, sigma2)


def _per_sample(values, x):
    """Broadcast a scalar or per-sample coefficient against ``x``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values
    return values.reshape((-1,) + (1,) * (np.ndim(x) - 1))


def forward_diffuse(x0, t, eps, sched: NoiseSchedule):
    """``sqrt(a_t) x0 + sqrt(1 - a_t) eps``; ``t`` may be per-sample for a batch."""
    x0 = np.asarray(x0, dtype=np.float64)
    if np.shape(eps) != x0.shape:
        raise ValueError(f"eps shape {np.shape(eps)} != x0 shape {x0.shape}")
    t = sched.check_t(t)
    a = _per_sample(sched.alpha_cum[t], x0)
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def _sumsq(r, batched: bool):
    if batched:
        return np.sum(np.square(r.reshape(r.shape[0], -1)), axis=1)
    return float(np.sum(np.square(r)))


def ddpm_loss(model: NoisePredictor, x0, t, eps, sched: NoiseSchedule):
    """Squared error ``||eps - eps_theta(x_t, t)||^2``; one value per sample for a batch."""
    x_t = forward_diffuse(x0, t, eps, sched)
    r = eps - model(x_t, t)
    return _sumsq(r, np.ndim(x0) == len(model.image_shape) + 1)


def _train_step(model, opt, x0, t, eps, sched, adapters_only, weights=None):
    """One Adam step on the weighted mean of per-sample squared errors."""
    x_t = forward_diffuse(x0, t, eps, sched)
    out, cache = model.forward(x_t, t)
    r = out - eps
    w = np.ones(len(x0)) if weights is None else np.asarray(weights, dtype=np.float64)
    per = np.sum(np.square(r.reshape(len(x0), -1)), axis=1)
    loss = float(np.dot(w, per) / len(x0))
    if not math.isfinite(loss):
        raise FloatingPointError("training loss diverged")
    upstream = 2.0 * r * _per_sample(w, r) / len(x0)
    grads, _ = model.backward(cache, upstream)
    if adapters_only:
        grads = grads[model.n_base_params:]
    opt.step(model.trainable(adapters_only), grads)
    return loss


@dataclass
class PretrainConfig:
    steps: int = 4000
    batch_size: int = 32
    lr: float = 1e-3
    hidden: tuple = (256, 256)
    time_embed_dim: int = 16


def pretrain(images, sched: NoiseSchedule, rng: Rng, config: PretrainConfig | None = None,
             loss_log: list | None = None, latent: bool = False) -> NoisePredictor:
    """Train a fresh noise predictor with Adam on the denoising loss.

    ``loss_log`` (if given) receives ``(step, loss)`` tuples.
    """
    config = config or PretrainConfig()
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or len(images) == 0:
        raise ValueError("pretraining needs a nonempty stack of 2-D images")
    model = NoisePredictor(images.shape[1:], config.hidden, config.time_embed_dim,
                           sched.T, rng=rng, latent=latent)
    opt = Adam(lr=config.lr)
    bs = min(config.batch_size, len(images))
    for step in range(config.steps):
        idx = rng.integers(0, len(images) - 1, size=bs)
        t = rng.integers(1, sched.T, size=bs)
        eps = gaussian_sample(rng, (bs, *images.shape[1:]))
        loss = _train_step(model, opt, images[idx], t, eps, sched, False)
        if loss_log is not None:
            loss_log.append((step, loss))
        if step % 1000 == 0:
            log.debug("pretrain step %d loss %.4f", step, loss)
    return model


@dataclass
class FinetuneSpec:
    mode: str = "full_no_prior"
    steps_per_image: int = 50
    learning_rate: float | None = None  # None: per-mode default
    prior_weight: float = 1.0
    prior_set_size: int | None = None  # None: 50 x number of members
    augmentations: list = field(default_factory=list)
    lora_rank: int = 4
    lora_scale: float = 1.0
    batch_size: int = 4

    DEFAULT_LR = {"full_no_prior": 1e-3, "full_with_prior": 1e-3, "lora": 3e-3}

    def __post_init__(self):
        if self.mode not in FINETUNE_MODES:
            raise ValueError(f"unknown fine-tune mode {self.mode!r}")
        if self.steps_per_image < 1:
            raise ValueError("steps_per_image must be >= 1")
        self.augmentations = [a if isinstance(a, Defense) else Defense(a) for a in self.augmentations]

    @property
    def lr(self) -> float:
        return self.DEFAULT_LR[self.mode] if self.learning_rate is None else self.learning_rate


def finetune(pre: NoisePredictor, members, spec: FinetuneSpec, rng: Rng, sched: NoiseSchedule,
             class_images=None, sampler=None, loss_log: list | None = None) -> NoisePredictor:
    """Fine-tune a copy of ``pre`` on ``members``.

    For ``full_with_prior`` the class set is ``class_images`` if given, else
    drawn from ``sampler(pre, sched, rng, n)`` before training starts.
    ``pre`` is never modified.
    """
    members = np.asarray(members, dtype=np.float64)
    if members.ndim != 3 or len(members) == 0:
        raise ValueError("fine-tuning needs a nonempty stack of member images")
    model = pre.copy()
    adapters_only = spec.mode == "lora"
    if adapters_only:
        model.add_lora(spec.lora_rank, spec.lora_scale, rng.split(0x10AA))
    prior = None
    if spec.mode == "full_with_prior":
        if class_images is None:
            if sampler is None:
                raise ValueError("prior-preservation mode needs class_images or a sampler")
            n_prior = spec.prior_set_size or 50 * len(members)
            class_images = sampler(pre, sched, rng, n_prior)
        prior = np.asarray(class_images, dtype=np.float64)
    opt = Adam(lr=spec.lr)
    total = spec.steps_per_image * len(members)
    bs = spec.batch_size
    order = []
    for step in range(total):
        batch = []
        for _ in range(bs):
            if not order:
                order = list(rng.permutation(len(members)))
            batch.append(augment(members[order.pop()], spec.augmentations, rng))
        x0 = np.stack(batch)
        t = rng.integers(1, sched.T, size=bs)
        eps = gaussian_sample(rng, x0.shape)
        weights = None
        if prior is not None:
            pidx = rng.integers(0, len(prior) - 1, size=bs)
            x0 = np.concatenate([x0, prior[pidx]])
            t = np.concatenate([t, rng.integers(1, sched.T, size=bs)])
            eps = np.concatenate([eps, gaussian_sample(rng, (bs, *members.shape[1:]))])
            # mean over 2*bs rows; rescale so member and prior terms each average over bs
            weights = np.concatenate([np.full(bs, 2.0), np.full(bs, 2.0 * spec.prior_weight)])
        loss = _train_step(model, opt, x0, t, eps, sched, adapters_only, weights)
        if loss_log is not None:
            loss_log.append((step, loss))
    return model


# sampling ----------------------------------------------------------------

def _denoise(model, x, t_start: int, sched: NoiseSchedule, rng: Rng, known=None, known_x0=None,
             known_rng: Rng | None = None):
    """Ancestral DDPM steps from ``t_start`` down to 0.

    With ``known``/``known_x0``, pixels where ``known == 1`` are replaced after
    every step by ``known_x0`` diffused to the new timestep, using noise from
    ``known_rng`` so the free-running stream matches plain sampling.
    """
    n = len(x)
    for t in range(t_start, 0, -1):
        beta, a_t, a_prev = sched.beta[t], sched.alpha_cum[t], sched.alpha_cum[t - 1]
        eps_hat = model(x, np.full(n, t))
        mean = (x - beta / math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(1.0 - beta)
        if t > 1:
            var = beta * (1.0 - a_prev) / (1.0 - a_t)
            x = mean + math.sqrt(var) * gaussian_sample(rng, x.shape)
        else:
            x = mean
        if known is not None:
            if t > 1:
                kx = forward_diffuse(known_x0, np.full(n, t - 1), gaussian_sample(known_rng, x.shape), sched)
            else:
                kx = known_x0
            x = known * kx + (1.0 - known) * x
    return x


def ddpm_sample(model: NoisePredictor, sched: NoiseSchedule, rng: Rng, n: int | None = None):
    """Ancestral samples from ``x_T ~ N(0, I)``, clamped to [0, 1] at the end.

    Returns one image, or a stack of ``n`` images when ``n`` is given.
    """
    shape = (1 if n is None else n, *model.image_shape)
    x = _denoise(model, gaussian_sample(rng, shape), sched.T, sched, rng)
    x = np.clip(x, 0.0, 1.0)
    return x[0] if n is None else x


def img2img(model: NoisePredictor, x0, strength: float, sched: NoiseSchedule, rng: Rng,
            k: int | None = None):
    """Diffuse ``x0`` to ``round(strength*T)`` and denoise back; ``k`` candidates if given."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must be in (0, 1], got {strength}")
    x0 = np.asarray(x0, dtype=np.float64)
    n = 1 if k is None else k
    t_star = int(round(strength * sched.T))
    xs = np.repeat(x0[None], n, axis=0)
    if t_star > 0:
        x_t = forward_diffuse(xs, np.full(n, t_star), gaussian_sample(rng, xs.shape), sched)
        xs = np.clip(_denoise(model, x_t, t_star, sched, rng), 0.0, 1.0)
    return xs[0] if k is None else xs


def inpaint(model: NoisePredictor, x0, known, sched: NoiseSchedule, rng: Rng,
            k: int | None = None):
    """Masked-resampling inpainting: ``known == 1`` pixels are pinned to diffused ``x0``.

    Noise for the known region comes from ``rng.split(KNOWN_STREAM)``; the main
    stream is consumed exactly as in :func:`ddpm_sample`, so an all-unknown mask
    reproduces it.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    known = np.asarray(known, dtype=np.float64)
    if known.shape != x0.shape:
        raise ValueError("mask shape must match image shape")
    if not np.all((known == 0.0) | (known == 1.0)):
        raise ValueError("inpainting mask must be binary")
    n = 1 if k is None else k
    xs0 = np.repeat(x0[None], n, axis=0)
    known_rng = rng.split(KNOWN_STREAM)
    x_T = gaussian_sample(rng, xs0.shape)
    x = known * forward_diffuse(xs0, np.full(n, sched.T), gaussian_sample(known_rng, xs0.shape), sched) \
        + (1.0 - known) * x_T
    x = np.clip(_denoise(model, x, sched.T, sched, rng, known, xs0, known_rng), 0.0, 1.0)
    return x[0] if k is None else x


# forward-DDIM quantities -------------------------------------------------

def ddim_forward_mean(model: NoisePredictor, x_t, t: int, sched: NoiseSchedule):
    """Model mean of the forward DDIM transition ``x_t -> x_{t+1}`` and the predicted x0.

    Returns ``(mean, f_theta)``.
    """
    sched.check_t(t, 1, sched.T - 1)
    a_t, a_next = sched.alpha_cum[t], sched.alpha_cum[t + 1]
    eps_hat = model(x_t, t)
    f_theta = (x_t - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)
    mean = math.sqrt(a_next) * f_theta + math.sqrt(1.0 - a_next) * eps_hat
    return mean, f_theta


def coefficient_ct(t: int, sched: NoiseSchedule) -> float:
    """Scale linking the forward-DDIM residual norm to the noise-prediction error."""
    sched.check_t(t, 1, sched.T - 1)
    return _ct(sched.alpha_cum[t], sched.alpha_cum[t + 1])


def _ct(a_t, a_next):
    return math.sqrt(1.0 - a_t) * math.sqrt(a_next) / math.sqrt(a_t) + math.sqrt(1.0 - a_next)


def dropped_coefficients(sched: NoiseSchedule):
    """Per-step magnitudes of the two terms discarded by the loss approximation.

    Returns arrays over t = 1..T-1 of ``sqrt(1 - a_{t+1}/a_t)`` and
    ``|sqrt((1 - a_t) a_{t+1} / a_t) - sqrt(1 - a_{t+1})|``.
    """
    a_t = sched.alpha_cum[1:sched.T]
    a_next = sched.alpha_cum[2:sched.T + 1]
    fresh = np.sqrt(1.0 - a_next / a_t)
    mismatch = np.abs(np.sqrt((1.0 - a_t) * a_next / a_t) - np.sqrt(1.0 - a_next))
    return fresh, mismatch
