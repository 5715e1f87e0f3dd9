"""Liger: gated linear recurrent attention kernels and a transformer
linearization pipeline, small enough to run on a desk CPU."""

from .data import Corpus, VOCAB_SIZE
from .errors import LigerError
from .kernels import AttentionConfig, RecurrentState
from .model import DecodeSession, LoraAdapter, Model, ModelSpec, lora_apply
from .pipeline import (
    LinearizeConfig,
    TrainConfig,
    ablation_arm,
    finetune,
    linearize,
    train_base,
)
from .rng import Rng
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "Corpus",
    "DecodeSession",
    "LigerError",
    "LinearizeConfig",
    "LoraAdapter",
    "Model",
    "ModelSpec",
    "RecurrentState",
    "Rng",
    "Tensor",
    "TrainConfig",
    "VOCAB_SIZE",
    "ablation_arm",
    "backward",
    "finetune",
    "linearize",
    "lora_apply",
    "no_grad",
    "train_base",
    "__version__",
]
