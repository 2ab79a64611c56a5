import numpy as np
import pytest

from cgidm.diffusion import build_schedule
from cgidm.neural_net import NoisePredictor
from cgidm.tensor_core import Rng


def random_model(seed, shape=(4, 4), hidden=(12, 10), T=20, lora=0):
    """Small predictor with a nonzero output layer and skip gains, for gradient checks."""
    rng = Rng(seed)
    m = NoisePredictor(shape, hidden, time_embed_dim=6, T=T, rng=rng)
    m.weights[-1] = 0.3 * rng.uniform(m.weights[-1].shape) - 0.15
    m.biases[-1] = 0.1 * rng.uniform(m.biases[-1].shape)
    m.skip[:] = 0.5 * rng.uniform(m.skip.shape) - 0.25
    if lora:
        m.add_lora(lora, 0.7, rng)
        for i in range(len(m.lora_B)):
            m.lora_B[i] = 0.2 * rng.uniform(m.lora_B[i].shape) - 0.1
    return m


@pytest.fixture
def sched():
    return build_schedule(20, 1e-3, 0.05)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture(scope="session")
def latent_world():
    """Tiny latent-space setup: linear AE 16x16 -> 8x8, pretrained and fine-tuned predictors.

    Returns (sched, ae, theta, theta_prime, members, holdout).
    """
    from cgidm.datagen import default_styles, gen_style, random_style
    from cgidm.diffusion import FinetuneSpec, PretrainConfig, finetune, pretrain
    from cgidm.neural_net import train_autoencoder

    s = build_schedule(100, 0.02, 0.02)
    r = Rng(0)
    styles = [random_style(r) for _ in range(8)]
    corpus = np.concatenate([gen_style(st, 20, 16, Rng(10 + i)) for i, st in enumerate(styles)])
    ev = gen_style(default_styles(1)[0], 12, 16, Rng(99))
    ae = train_autoencoder(corpus, (8, 8), Rng(1), steps=1500)
    theta = pretrain(ae.encode(corpus), s, Rng(2), PretrainConfig(steps=2000, hidden=(64, 64)))
    theta_prime = finetune(theta, ae.encode(ev[:6]), FinetuneSpec(), Rng(3), s)
    return s, ae, theta, theta_prime, ev[:6], ev[6:]


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
