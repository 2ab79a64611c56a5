"""Dense noise predictor with hand-written backprop, Adam, LoRA and a linear autoencoder.

The predictor maps a batch of flattened images concatenated with a sinusoidal
time embedding through SiLU hidden layers to a batch of flattened images, plus
a skip path ``skip[t] * x_t`` with one learned gain per timestep. The hidden
layers are narrower than the image, so without the skip the network could not
pass through the full-rank noise it has to predict.
Every weight matrix may carry a low-rank adapter ``scale * B @ A``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .files import atomic_write_bytes
from .tensor_core import Rng, check_finite, gaussian_sample

MAGIC = b"CGIDM1\n"


def time_embedding(t, dim: int, T: int | None = None) -> np.ndarray:
    """Sinusoidal embedding ``[sin(t w_0), cos(t w_0), sin(t w_1), ...]``.

    ``w_k = 10000 ** (-2k/dim)``. ``t`` may be an int or a 1-D integer array,
    in which case one row per entry is returned.
    """
    if dim % 2:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t))
    if T is not None and (np.any(t < 0) or np.any(t > T)):
        raise ValueError(f"timestep outside [0, {T}]")
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    arg = t.astype(np.float64)[:, None] * freqs[None, :]
    emb = np.empty((t.shape[0], dim))
    emb[:, 0::2] = np.sin(arg)
    emb[:, 1::2] = np.cos(arg)
    return emb[0] if scalar else emb


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


@dataclass
class ForwardCache:
    inputs: list
    pre: list
    sig: list
    batched: bool
    x: np.ndarray
    t: np.ndarray


class NoisePredictor:
    """Noise-prediction MLP ``eps_theta(x_t, t)``."""

    def __init__(self, image_shape, hidden=(256, 256), time_embed_dim: int = 16,
                 T: int = 100, rng: Rng | None = None, latent: bool = False,
                 zero_final: bool = True):
        self.image_shape = tuple(int(s) for s in image_shape)
        self.hidden = tuple(int(h) for h in hidden)
        self.time_embed_dim = int(time_embed_dim)
        self.T = int(T)
        self.latent = bool(latent)
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if len(self.hidden) < 2:
            raise ValueError("need at least two hidden layers")
        n_pix = self.n_pixels
        dims = [n_pix + self.time_embed_dim, *self.hidden, n_pix]
        rng = rng if rng is not None else Rng(0)
        self.weights, self.biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            if last and zero_final:
                w = np.zeros((fan_in, fan_out))
            else:
                w = gaussian_sample(rng, (fan_in, fan_out)) / np.sqrt(fan_in)
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))
        self.skip = np.zeros(self.T + 1)
        self.lora_A = None
        self.lora_B = None
        self.lora_scale = 1.0

    @property
    def n_pixels(self) -> int:
        return int(np.prod(self.image_shape))

    @property
    def lora_rank(self) -> int:
        return 0 if self.lora_A is None else self.lora_A[0].shape[0]

    def add_lora(self, rank: int = 4, scale: float = 1.0, rng: Rng | None = None) -> None:
        """Attach adapters to every weight; ``B`` starts at zero so outputs are unchanged."""
        rng = rng if rng is not None else Rng(1)
        self.lora_scale = float(scale)
        self.lora_A = [gaussian_sample(rng, (rank, w.shape[1])) / np.sqrt(rank)
                       for w in self.weights]
        self.lora_B = [np.zeros((w.shape[0], rank)) for w in self.weights]

    def effective_weights(self) -> list:
        if self.lora_A is None:
            return self.weights
        return [w + self.lora_scale * (b @ a)
                for w, a, b in zip(self.weights, self.lora_A, self.lora_B)]

    def merged(self) -> "NoisePredictor":
        """Plain copy with adapters folded into the base weights."""
        out = self.copy()
        out.weights = [w.copy() for w in self.effective_weights()]
        out.lora_A = out.lora_B = None
        return out

    def copy(self) -> "NoisePredictor":
        out = object.__new__(NoisePredictor)
        out.__dict__.update(self.__dict__)
        out.weights = [w.copy() for w in self.weights]
        out.biases = [b.copy() for b in self.biases]
        out.skip = self.skip.copy()
        if self.lora_A is not None:
            out.lora_A = [a.copy() for a in self.lora_A]
            out.lora_B = [b.copy() for b in self.lora_B]
        return out

    # parameter bookkeeping -------------------------------------------------

    def params(self) -> list:
        """All parameter arrays in declaration order (checkpoint order)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        out.append(self.skip)
        if self.lora_A is not None:
            for a, b in zip(self.lora_A, self.lora_B):
                out += [a, b]
        return out

    @property
    def n_base_params(self) -> int:
        """Number of arrays in :meth:`params` that belong to the base network."""
        return 2 * len(self.weights) + 1

    def trainable(self, adapters_only: bool = False) -> list:
        if adapters_only:
            if self.lora_A is None:
                raise ValueError("model has no adapters")
            return self.params()[self.n_base_params:]
        return self.params()

    def manifest(self) -> dict:
        return {
            "kind": "noise_predictor",
            "image_shape": list(self.image_shape),
            "hidden": list(self.hidden),
            "time_embed_dim": self.time_embed_dim,
            "T": self.T,
            "latent": self.latent,
            "lora_rank": self.lora_rank,
            "lora_scale": self.lora_scale,
        }

    # forward / backward ----------------------------------------------------

    def _prepare(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        batched = x.shape != self.image_shape
        if batched and x.shape[1:] != self.image_shape:
            raise ValueError(f"input shape {x.shape} does not match image shape {self.image_shape}")
        xb = x.reshape(-1, self.n_pixels)
        t = np.broadcast_to(np.asarray(t), (xb.shape[0],))
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep outside [0, {self.T}]")
        return xb, t, batched

    def forward(self, x, t):
        """Return (output, cache). ``x`` is one image or a batch ``(B, *image_shape)``."""
        xb, t, batched = self._prepare(x, t)
        h = np.concatenate([xb, time_embedding(t, self.time_embed_dim)], axis=1)
        weights = self.effective_weights()
        inputs, pre, sig = [], [], []
        n = len(weights)
        for i, (w, b) in enumerate(zip(weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            if i < n - 1:
                h, s = _silu(z)
                pre.append(z)
                sig.append(s)
            else:
                h = z
        h = h + self.skip[t][:, None] * xb
        out = h.reshape((-1, *self.image_shape))
        if not batched:
            out = out[0]
        return out, ForwardCache(inputs, pre, sig, batched, xb, t)

    def __call__(self, x, t):
        return self.forward(x, t)[0]

    def backward(self, cache: ForwardCache, upstream, param_grads: bool = True):
        """Gradients of ``<upstream, output>``.

        Returns ``(grads, input_grad)`` where ``grads`` follows :meth:`params`
        order (``None`` when ``param_grads`` is false) and ``input_grad`` has
        the image shape of the forward input; time-embedding slots are dropped.
        """
        upstream = np.asarray(upstream, dtype=np.float64)
        g = upstream.reshape(-1, self.n_pixels)
        if g.shape[0] != cache.inputs[0].shape[0]:
            raise ValueError("upstream batch does not match forward batch")
        weights = self.effective_weights()
        n = len(weights)
        g_out = g
        dW, db = [None] * n, [None] * n
        for i in range(n - 1, -1, -1):
            if i < n - 1:
                z, s = cache.pre[i], cache.sig[i]
                g = g * (s * (1.0 + z * (1.0 - s)))
            if param_grads:
                dW[i] = cache.inputs[i].T @ g
                db[i] = g.sum(axis=0)
            g = g @ weights[i].T
        input_grad = g[:, :self.n_pixels] + self.skip[cache.t][:, None] * g_out
        input_grad = input_grad.reshape((-1, *self.image_shape))
        if not cache.batched:
            input_grad = input_grad[0]
        if not param_grads:
            return None, input_grad
        grads = []
        for w_g, b_g in zip(dW, db):
            grads += [w_g, b_g]
        grads.append(np.bincount(cache.t, weights=np.sum(g_out * cache.x, axis=1),
                                 minlength=self.T + 1))
        if self.lora_A is not None:
            s = self.lora_scale
            for w_g, a, b in zip(dW, self.lora_A, self.lora_B):
                grads += [s * (b.T @ w_g), s * (w_g @ a.T)]
        return grads, input_grad


def predict_noise(model: NoisePredictor, x_t, t):
    return model(x_t, t)


def backward(model: NoisePredictor, x_t, t, upstream):
    """Parameter and input gradients of ``<upstream, eps_theta(x_t, t)>``."""
    out, cache = model.forward(x_t, t)
    if np.shape(upstream) != out.shape:
        raise ValueError(f"upstream shape {np.shape(upstream)} != output shape {out.shape}")
    return model.backward(cache, upstream)


# optimizer -----------------------------------------------------------------

@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list, grads: list) -> list:
        """Update ``params`` in place with bias-corrected Adam and return them."""
        if len(params) != len(grads):
            raise ValueError("params/grads length mismatch")
        for p, g in zip(params, grads):
            if p.shape != np.shape(g):
                raise ValueError(f"grad shape {np.shape(g)} != param shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def adam_step(state: Adam, params: list, grads: list) -> list:
    return state.step(params, grads)


# autoencoder ---------------------------------------------------------------

class AutoEncoder:
    """Linear encoder/decoder pair between an image grid and a latent grid."""

    def __init__(self, image_shape, latent_shape, rng: Rng | None = None):
        self.image_shape = tuple(image_shape)
        self.latent_shape = tuple(latent_shape)
        p, q = int(np.prod(self.image_shape)), int(np.prod(self.latent_shape))
        rng = rng if rng is not None else Rng(0)
        self.enc_w = gaussian_sample(rng, (p, q)) / np.sqrt(p)
        self.enc_b = np.zeros(q)
        self.dec_w = gaussian_sample(rng, (q, p)) / np.sqrt(q)
        self.dec_b = np.zeros(p)

    @classmethod
    def identity(cls, shape) -> "AutoEncoder":
        ae = cls(shape, shape)
        n = int(np.prod(shape))
        ae.enc_w = np.eye(n)
        ae.dec_w = np.eye(n)
        return ae

    def params(self) -> list:
        return [self.enc_w, self.enc_b, self.dec_w, self.dec_b]

    def manifest(self) -> dict:
        return {"kind": "autoencoder", "image_shape": list(self.image_shape),
                "latent_shape": list(self.latent_shape)}

    def _flat(self, x, shape):
        x = np.asarray(x, dtype=np.float64)
        if x.shape == shape:
            return x.reshape(1, -1), False
        if x.shape[1:] != shape:
            raise ValueError(f"shape {x.shape} does not match {shape}")
        return x.reshape(x.shape[0], -1), True

    def encode(self, x) -> np.ndarray:
        xb, batched = self._flat(x, self.image_shape)
        z = (xb @ self.enc_w + self.enc_b).reshape((-1, *self.latent_shape))
        return z if batched else z[0]

    def decode_raw(self, z) -> np.ndarray:
        zb, batched = self._flat(z, self.latent_shape)
        x = (zb @ self.dec_w + self.dec_b).reshape((-1, *self.image_shape))
        return x if batched else x[0]

    def decode(self, z) -> np.ndarray:
        return np.clip(self.decode_raw(z), 0.0, 1.0)


def encode(ae: AutoEncoder, x):
    return ae.encode(x)


def decode(ae: AutoEncoder, z):
    return ae.decode(z)


def train_autoencoder(images, latent_shape, rng: Rng, steps: int = 2000,
                      lr: float = 1e-3, batch_size: int = 32) -> AutoEncoder:
    """Fit a linear autoencoder by Adam on mean squared reconstruction error."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or len(images) == 0:
        raise ValueError("expected a nonempty stack of 2-D images")
    ae = AutoEncoder(images.shape[1:], latent_shape, rng)
    X = images.reshape(len(images), -1)
    opt = Adam(lr=lr)
    for _ in range(steps):
        idx = rng.integers(0, len(X) - 1, size=min(batch_size, len(X)))
        xb = X[idx]
        z = xb @ ae.enc_w + ae.enc_b
        r = z @ ae.dec_w + ae.dec_b
        g_r = 2.0 * (r - xb) / r.size
        g_dec_w = z.T @ g_r
        g_dec_b = g_r.sum(axis=0)
        g_z = g_r @ ae.dec_w.T
        g_enc_w = xb.T @ g_z
        g_enc_b = g_z.sum(axis=0)
        opt.step(ae.params(), [g_enc_w, g_enc_b, g_dec_w, g_dec_b])
    return ae


# checkpoints ---------------------------------------------------------------

def checkpoint_bytes(model) -> bytes:
    head = MAGIC + (json.dumps(model.manifest(), sort_keys=True) + "\n").encode("ascii")
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params())
    return head + body


def save_checkpoint(path, model) -> None:
    for p in model.params():
        check_finite(p, "checkpoint parameters")
    atomic_write_bytes(path, checkpoint_bytes(model))


def load_checkpoint(path):
    """Load a :class:`NoisePredictor` or :class:`AutoEncoder` written by :func:`save_checkpoint`."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: bad checkpoint magic")
    nl = data.index(b"\n", len(MAGIC))
    manifest = json.loads(data[len(MAGIC):nl].decode("ascii"))
    body = data[nl + 1:]
    if manifest["kind"] == "noise_predictor":
        model = NoisePredictor(manifest["image_shape"], manifest["hidden"],
                               manifest["time_embed_dim"], manifest["T"],
                               latent=manifest["latent"])
        if manifest["lora_rank"]:
            model.add_lora(manifest["lora_rank"], manifest["lora_scale"])
    elif manifest["kind"] == "autoencoder":
        model = AutoEncoder(manifest["image_shape"], manifest["latent_shape"])
    else:
        raise ValueError(f"{path}: unknown checkpoint kind {manifest['kind']!r}")
    params = model.params()
    expected = sum(p.size for p in params) * 8
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} parameter bytes, found {len(body)}")
    offset = 0
    for p in params:
        n = p.size
        p[...] = np.frombuffer(body, dtype="<f8", count=n, offset=offset).reshape(p.shape)
        offset += n * 8
    return model
