"""Next-token training for the tiny LM on a synthetic corpus.

Training batches are random windows of a packed token stream (documents
joined by a separator), GPT-style. Held-out loss is measured per padded
document instead, since that matches how the model is used downstream: one
document at a time, starting at position 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigError
from .transformer import TinyDecoderLM

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LMTrainConfig:
    steps: int = 2000
    batch_size: int = 16
    seq_len: int = 48
    lr: float = 3e-3
    warmup_steps: int = 60
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.steps > 0 and not 0 <= self.warmup_steps <= self.steps:
            raise ConfigError("warmup_steps must lie within [0, steps]")
        if self.batch_size < 1 or self.seq_len < 2:
            raise ConfigError("batch_size >= 1 and seq_len >= 2 required")


def _lr_at(step: int, cfg: LMTrainConfig) -> float:
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if cfg.steps == cfg.warmup_steps:
        return cfg.lr
    frac = (step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps)
    return cfg.lr * max(0.0, 1.0 - frac)


def _doc_matrix(docs: list[list[int]], seq_len: int, pad_id: int) -> torch.Tensor:
    """Document rows, truncated/padded to seq_len + 1 (inputs and targets)."""
    width = seq_len + 1
    rows = np.full((len(docs), width), pad_id, dtype=np.int64)
    for r, doc in enumerate(docs):
        ids = doc[:width]
        rows[r, : len(ids)] = ids
    return torch.from_numpy(rows)


def pack_stream(docs: list[list[int]], separator_id: int | None = None) -> np.ndarray:
    """Concatenate documents into one token stream, optionally separated."""
    parts = []
    for doc in docs:
        if separator_id is not None:
            parts.append([separator_id])
        parts.append(list(doc))
    flat = [t for part in parts for t in part]
    return np.asarray(flat, dtype=np.int64)


def train_toy_lm(
    model: TinyDecoderLM,
    docs: list[list[int]],
    cfg: LMTrainConfig,
    separator_id: int | None = None,
) -> TinyDecoderLM:
    """Train in place with AdamW and a linear warmup/decay schedule."""
    if not docs:
        raise ValueError("empty corpus")
    if cfg.steps == 0:
        return model
    stream = pack_stream(docs, separator_id)
    seq = min(cfg.seq_len, model.cfg.max_context)
    if len(stream) < seq + 1:
        raise ValueError(
            f"corpus too small: {len(stream)} tokens < seq_len + 1 = {seq + 1}"
        )
    rng = np.random.default_rng(cfg.seed)
    decay, no_decay = [], []
    for p in model.parameters():
        (decay if p.dim() >= 2 else no_decay).append(p)
    opt = torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.lr,
    )
    model.train()
    stream_t = torch.from_numpy(stream)
    for step in range(cfg.steps):
        starts = rng.integers(0, len(stream) - seq - 1, size=cfg.batch_size)
        x = torch.stack([stream_t[s : s + seq] for s in starts])
        y = torch.stack([stream_t[s + 1 : s + seq + 1] for s in starts])
        for group in opt.param_groups:
            group["lr"] = _lr_at(step, cfg)
        _, loss = model(x, y)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        if step % 200 == 0 or step == cfg.steps - 1:
            log.info("lm step %d/%d loss %.4f", step, cfg.steps, loss.item())
    model.eval()
    model.mark_updated()
    return model


def lm_eval_loss(
    model: TinyDecoderLM,
    docs: list[list[int]],
    seq_len: int = 48,
    pad_id: int = 0,
    batch_size: int = 128,
) -> float:
    """Mean per-token next-token cross-entropy over padded documents."""
    docs = [d for d in docs if len(d) >= 2]
    if not docs:
        raise ValueError("corpus has no documents of length >= 2")
    seq = min(seq_len, model.cfg.max_context - 1)
    matrix = _doc_matrix(docs, seq, pad_id)
    total, count = 0.0, 0
    model.eval()
    with torch.no_grad():
        for s in range(0, len(docs), batch_size):
            rows = matrix[s : s + batch_size]
            x = rows[:, :-1]
            y = rows[:, 1:].clone()
            y[x == pad_id] = -100
            y[y == pad_id] = -100
            logits, _ = model(x)
            loss = F.cross_entropy(logits.reshape(-1, logits.size(-1)),
                                   y.reshape(-1), ignore_index=-100,
                                   reduction="sum")
            total += loss.item()
            count += int((y != -100).sum())
    return total / count
