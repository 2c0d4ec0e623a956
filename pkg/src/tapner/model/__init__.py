from .config import ModelConfig
from .decoding import DecodeParams, apply_repetition_penalty, greedy_generate, pick_next_token
from .serialization import load_container, load_model, save_container, save_model
from .tokenizer import Vocab
from .training import LMTrainConfig, lm_eval_loss, train_toy_lm
from .transformer import (
    GenerationCache,
    GrowableRepBundle,
    RepBundle,
    TinyDecoderLM,
    init_model,
)

__all__ = [
    "ModelConfig",
    "DecodeParams",
    "apply_repetition_penalty",
    "greedy_generate",
    "pick_next_token",
    "load_container",
    "load_model",
    "save_container",
    "save_model",
    "Vocab",
    "LMTrainConfig",
    "lm_eval_loss",
    "train_toy_lm",
    "GenerationCache",
    "GrowableRepBundle",
    "RepBundle",
    "TinyDecoderLM",
    "init_model",
]
