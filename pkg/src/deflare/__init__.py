"""Semi-supervised lens-flare removal at desk scale.

A numpy-backed tape autodiff core, a linear-attention restoration network,
a flare synthesis pipeline, a quality-gated pseudo-label bank with an EMA
teacher, restoration metrics and a CLI tying them together.
"""

from .tensor import Tensor, Tape, grad_check
from .model import ModelConfig, init_params, restorer_forward, wrap_params
from .synth import AugmentationParams, LabeledPair, Rng, synthesize_pair
from .losses import LossWeights
from .engine import PseudoLabelBank, TrainConfig, Trainer
from .metrics import MetricsReport, psnr, ssim, masked_psnr

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Tape",
    "grad_check",
    "ModelConfig",
    "init_params",
    "restorer_forward",
    "wrap_params",
    "AugmentationParams",
    "LabeledPair",
    "Rng",
    "synthesize_pair",
    "LossWeights",
    "PseudoLabelBank",
    "TrainConfig",
    "Trainer",
    "MetricsReport",
    "psnr",
    "ssim",
    "masked_psnr",
    "__version__",
]
