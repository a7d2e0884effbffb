"""Noisy autoencoders with marginalized noise penalties."""

from .model import NaeParams, encode_clean, encode_deterministic, encode_noisy, reconstruct
from .noise import NoiseDist, NoiseSpec
from .numeric import Rng
from .penalties import PenaltyConfig
from .training import MlpParams, TrainConfig, fine_tune_classifier, train_nae, train_supervised_deep

__version__ = "0.1.0"

__all__ = [
    "MlpParams", "NaeParams", "NoiseDist", "NoiseSpec", "PenaltyConfig", "Rng", "TrainConfig",
    "encode_clean", "encode_deterministic", "encode_noisy", "fine_tune_classifier", "reconstruct",
    "train_nae", "train_supervised_deep",
]
