"""Multimodal graph recommender with a NumPy reverse-mode autodiff core."""
from .config import GlobalConfig, LocalConfig, LossWeights, RunConfig, TrainConfig
from .model import MGNM

__all__ = ["GlobalConfig", "LocalConfig", "LossWeights", "MGNM", "RunConfig", "TrainConfig"]
__version__ = "0.1.0"
