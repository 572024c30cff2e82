"""Mixture-of-lookup-experts toolkit: train tiny dense / moe / mole
transformers, re-parameterize mole experts into offloaded lookup tables,
decode against them, and account for the transfer costs."""

__version__ = "0.1.0"

from .config import CorpusConfig, ModelConfig, TrainConfig, load_config, toy_config
from .model import ModelParams, init_params, model_forward

__all__ = [
    "CorpusConfig",
    "ModelConfig",
    "ModelParams",
    "TrainConfig",
    "init_params",
    "load_config",
    "model_forward",
    "toy_config",
    "__version__",
]
