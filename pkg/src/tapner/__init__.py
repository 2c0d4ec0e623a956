"""tapner: streaming named entity recognition by probing a decoder-only LM.

The package trains small classifiers ("probes") on a frozen language model's
hidden states and attention weights, then fuses their outputs into entity
spans incrementally while the model generates text.
"""

from .iob2 import EntitySpan, decode_iob2, encode_iob2, iob2_labels
from .metrics import PRF, entity_typing_prf, mention_detection_prf, micro_prf
from .model import DecodeParams, ModelConfig, TinyDecoderLM, Vocab, init_model
from .propagation import (
    STRATEGIES,
    TokenwisePrediction,
    apply_strategy,
    propagate_adjacency,
    spanwise_propagation,
    spanwise_typing,
    tokenwise_only,
)
from .spans import AdjacencyScore, SpanScore, detect_adjacent, detect_spans_at, resolve_overlaps

__version__ = "0.1.0"

__all__ = [
    "EntitySpan",
    "decode_iob2",
    "encode_iob2",
    "iob2_labels",
    "PRF",
    "micro_prf",
    "mention_detection_prf",
    "entity_typing_prf",
    "ModelConfig",
    "DecodeParams",
    "TinyDecoderLM",
    "Vocab",
    "init_model",
    "STRATEGIES",
    "TokenwisePrediction",
    "apply_strategy",
    "propagate_adjacency",
    "spanwise_propagation",
    "spanwise_typing",
    "tokenwise_only",
    "AdjacencyScore",
    "SpanScore",
    "detect_adjacent",
    "detect_spans_at",
    "resolve_overlaps",
    "__version__",
]
