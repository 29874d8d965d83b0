"""Visual-vocabulary pre-training and novel-object captioning at desk scale."""

from .config import BatchConfig, DecodeConfig, LossMode, ModelConfig, Phase, RunConfig, TrainConfig, load_config
from .errors import VivoError
from .tokenizer import Vocabulary, build_tag_blocks, detokenize, tokenize

__version__ = "0.1.0"

__all__ = [
    "BatchConfig", "DecodeConfig", "LossMode", "ModelConfig", "Phase", "RunConfig", "TrainConfig",
    "Vocabulary", "VivoError", "build_tag_blocks", "detokenize", "load_config", "tokenize",
]
