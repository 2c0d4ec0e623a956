"""Greedy decoding with a repetition penalty."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from ..errors import ConfigError
from .transformer import TinyDecoderLM


@dataclass(frozen=True)
class DecodeParams:
    max_new_tokens: int = 32
    repetition_penalty: float = 1.2
    strategy: str = "greedy"

    def __post_init__(self):
        if self.max_new_tokens < 0:
            raise ConfigError("max_new_tokens must be >= 0")
        if self.repetition_penalty < 1.0:
            raise ConfigError("repetition_penalty must be >= 1")
        if self.strategy != "greedy":
            raise ConfigError(f"unsupported decoding strategy {self.strategy!r}")


def apply_repetition_penalty(
    logits_row: torch.Tensor, history: set[int], penalty: float
) -> torch.Tensor:
    """Discourage tokens already seen: positive logits are divided by the
    penalty, negative ones multiplied by it. Other entries are unchanged."""
    if penalty < 1.0:
        raise ConfigError("repetition_penalty must be >= 1")
    out = logits_row.clone()
    if penalty == 1.0 or not history:
        return out
    idx = torch.tensor(sorted(history), dtype=torch.long)
    vals = out[idx]
    out[idx] = torch.where(vals > 0, vals / penalty, vals * penalty)
    return out


def pick_next_token(logits_row: torch.Tensor, history: set[int], params: DecodeParams) -> int:
    penalized = apply_repetition_penalty(logits_row, history, params.repetition_penalty)
    return int(torch.argmax(penalized).item())


def greedy_generate(
    model: TinyDecoderLM, prompt: list[int], params: DecodeParams
) -> list[int]:
    """Prompt plus greedily decoded continuation (KV-cached)."""
    if not prompt:
        raise ValueError("prompt must be non-empty")
    capacity = len(prompt) + params.max_new_tokens
    if capacity > model.cfg.max_context:
        raise ConfigError(
            f"prompt ({len(prompt)}) + max_new_tokens ({params.max_new_tokens}) "
            f"exceeds context {model.cfg.max_context}"
        )
    cache = model.init_cache(capacity)
    tokens = list(prompt)
    logits_row = None
    for t in prompt:
        logits_row, _, _, cache = model.decode_step(cache, t)
    history = set(tokens)
    for _ in range(params.max_new_tokens):
        nxt = pick_next_token(logits_row, history, params)
        tokens.append(nxt)
        history.add(nxt)
        logits_row, _, _, cache = model.decode_step(cache, nxt)
    return tokens
