"""Desk-scale lab for telling which images a fine-tuned diffusion model was trained on,
by inverting the loss gap to its pretrained parent, with baselines and evaluation."""

from .tensor_core import Rng, gaussian_sample, l2_norm, uniform_timestep
from .neural_net import AutoEncoder, NoisePredictor, load_checkpoint, save_checkpoint
from .diffusion import (FinetuneSpec, NoiseSchedule, PretrainConfig, build_schedule, ddpm_sample,
                        finetune, forward_diffuse, img2img, inpaint, pretrain)
from .masking import MaskSpec, remove_partial
from .inversion import InversionConfig, cgi_dm, cgi_dm_latent, direct_gi
from .mia import cmia_score, mia_sweep, naive_score
from .metrics import ScoreTable, auc, best_threshold_acc, feature_embed, ssim
from .datagen import StyleSpec, gen_style, split_membership

__version__ = "0.1.0"

__all__ = [
    "Rng",
    "gaussian_sample",
    "l2_norm",
    "uniform_timestep",
    "AutoEncoder",
    "NoisePredictor",
    "load_checkpoint",
    "save_checkpoint",
    "FinetuneSpec",
    "NoiseSchedule",
    "PretrainConfig",
    "build_schedule",
    "ddpm_sample",
    "finetune",
    "forward_diffuse",
    "img2img",
    "inpaint",
    "pretrain",
    "MaskSpec",
    "remove_partial",
    "InversionConfig",
    "cgi_dm",
    "cgi_dm_latent",
    "direct_gi",
    "cmia_score",
    "mia_sweep",
    "naive_score",
    "ScoreTable",
    "auc",
    "best_threshold_acc",
    "feature_embed",
    "ssim",
    "StyleSpec",
    "gen_style",
    "split_membership",
]
