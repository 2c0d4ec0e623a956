"""Tiny pre-norm decoder-only transformer with full representation taps.

Architecture: learned token + position embeddings, GPT-2-style blocks
(LN -> causal self-attention -> residual, LN -> GELU MLP -> residual), a
final LayerNorm, and an output head tied to the token embedding.

Two forward paths share the same parameters:

* ``forward`` — float32, batched, SDPA-based; used for training only.
* ``forward_full`` / ``decode_step`` — float64, single sequence, manual
  attention; used for inference and probing. These expose every residual
  stream tap (embedding output plus each block output, ``n_layers + 1``
  taps) and every post-softmax attention weight. Running ``decode_step``
  over a prefix reproduces ``forward_full`` far inside the 1e-6 contract.

Positions are the raw indices of the tokens handed in; nothing is prepended.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, ContextOverflowError, UnknownTokenError
from .config import ModelConfig


def _validate_tokens(tokens, vocab_size: int) -> list[int]:
    ids = [int(t) for t in tokens]
    for t in ids:
        if t < 0 or t >= vocab_size:
            raise UnknownTokenError(f"token id {t} outside vocabulary of size {vocab_size}")
    return ids


class RepBundle:
    """Per-sequence tap of all hidden states, attention weights and logits.

    ``hidden``: [n_taps, T, d_model]; ``attn``: [L, H, T, T] lower
    triangular with softmax-normalized rows; ``logits``: [T, V]. All float64.
    """

    def __init__(self, hidden: torch.Tensor, attn: torch.Tensor, logits: torch.Tensor):
        self.hidden = hidden
        self.attn = attn
        self.logits = logits

    @property
    def seq_len(self) -> int:
        return self.hidden.shape[1]

    @property
    def n_taps(self) -> int:
        return self.hidden.shape[0]

    def hidden_at(self, layer: int, i: int) -> np.ndarray:
        if not 0 <= layer < self.n_taps:
            raise IndexError(f"tap index {layer} out of range [0, {self.n_taps})")
        if not 0 <= i < self.seq_len:
            raise IndexError(f"position {i} out of range [0, {self.seq_len})")
        return self.hidden[layer, i].numpy().copy()

    def attn_feature(self, j: int, i: int) -> np.ndarray:
        """Attention from position j back to i, all layers (outer) x heads."""
        if not 0 <= j < self.seq_len:
            raise IndexError(f"position {j} out of range [0, {self.seq_len})")
        if i > j or i < 0:
            raise IndexError(f"attention ({j} -> {i}) violates causality")
        return self.attn[:, :, j, i].reshape(-1).numpy().copy()


class GrowableRepBundle(RepBundle):
    """RepBundle over preallocated buffers, filled one position at a time.

    Used by the streaming engine so appending a step's representations costs
    a handful of in-place row writes.
    """

    def __init__(self, n_taps: int, n_layers: int, n_heads: int, capacity: int,
                 d_model: int, vocab_size: int):
        hidden = torch.zeros(n_taps, capacity, d_model, dtype=torch.float64)
        attn = torch.zeros(n_layers, n_heads, capacity, capacity, dtype=torch.float64)
        logits = torch.zeros(capacity, vocab_size, dtype=torch.float64)
        super().__init__(hidden, attn, logits)
        self._length = 0

    @property
    def seq_len(self) -> int:
        return self._length

    def append(self, hidden_col: torch.Tensor, attn_rows: torch.Tensor,
               logits_row: torch.Tensor) -> None:
        t = self._length
        if t >= self.hidden.shape[1]:
            raise ContextOverflowError("representation buffer full")
        self.hidden[:, t, :] = hidden_col
        self.attn[:, :, t, : t + 1] = attn_rows
        self.logits[t] = logits_row
        self._length = t + 1


@dataclass
class GenerationCache:
    """Per-stream KV cache; owns preallocated [L, H, N, head_dim] buffers."""

    k: torch.Tensor
    v: torch.Tensor
    length: int
    model_id: int
    model_version: int

    @property
    def capacity(self) -> int:
        return self.k.shape[2]


class _Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.ln1 = nn.LayerNorm(d)
        self.attn_qkv = nn.Linear(d, 3 * d)
        self.attn_proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.mlp_fc = nn.Linear(d, cfg.d_ff)
        self.mlp_proj = nn.Linear(cfg.d_ff, d)


class TinyDecoderLM(nn.Module):
    """Decoder-only LM exposing every sublayer hidden state and attention map."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.wte = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.wpe = nn.Embedding(cfg.max_context, cfg.d_model)
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self._init_weights()
        self._version = 0
        self._f64_cache: dict | None = None

    def _init_weights(self) -> None:
        # Local generator: identical (seed, config) gives bit-identical weights.
        g = torch.Generator().manual_seed(self.cfg.seed)
        resid_scale = 1.0 / math.sqrt(2 * self.cfg.n_layers)
        for name, p in self.named_parameters():
            with torch.no_grad():
                if name.endswith("bias") or ".ln" in name or name.startswith("ln_f"):
                    if name.endswith("weight"):
                        p.fill_(1.0)
                    else:
                        p.zero_()
                elif "attn_proj" in name or "mlp_proj" in name:
                    p.normal_(0.0, 0.02 * resid_scale, generator=g)
                else:
                    p.normal_(0.0, 0.02, generator=g)

    # -- bookkeeping ---------------------------------------------------------

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def weights_checksum(self) -> int:
        # Same parameter order as serialization: named_parameters() order.
        crc = 0
        for _, p in self.named_parameters():
            crc = zlib.crc32(p.detach().to(torch.float32).numpy().tobytes(), crc)
        return crc

    def mark_updated(self) -> None:
        """Invalidate inference caches after the parameters changed."""
        self._version += 1
        self._f64_cache = None

    def _f64(self) -> dict:
        if self._f64_cache is None:
            self._f64_cache = {
                name: p.detach().to(torch.float64)
                for name, p in self.named_parameters()
            }
        return self._f64_cache

    # -- float32 training path ------------------------------------------------

    def forward(self, tokens: torch.Tensor, targets: torch.Tensor | None = None):
        B, T = tokens.shape
        if T > self.cfg.max_context:
            raise ContextOverflowError(f"sequence length {T} > {self.cfg.max_context}")
        pos = torch.arange(T, device=tokens.device)
        x = self.wte(tokens) + self.wpe(pos)
        H, hd = self.cfg.n_heads, self.cfg.head_dim
        for blk in self.blocks:
            h = blk.ln1(x)
            qkv = blk.attn_qkv(h)
            q, k, v = qkv.split(self.cfg.d_model, dim=2)
            q = q.view(B, T, H, hd).transpose(1, 2)
            k = k.view(B, T, H, hd).transpose(1, 2)
            v = v.view(B, T, H, hd).transpose(1, 2)
            y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
            y = y.transpose(1, 2).reshape(B, T, self.cfg.d_model)
            x = x + blk.attn_proj(y)
            x = x + blk.mlp_proj(F.gelu(blk.mlp_fc(blk.ln2(x))))
        logits = F.linear(self.ln_f(x), self.wte.weight)
        loss = None
        if targets is not None:
            loss = F.cross_entropy(logits.view(-1, logits.size(-1)), targets.reshape(-1))
        return logits, loss

    # -- float64 inference path ------------------------------------------------

    def forward_full(self, tokens) -> RepBundle:
        """Full forward over one sequence, returning all probe-visible taps."""
        ids = _validate_tokens(tokens, self.cfg.vocab_size)
        T = len(ids)
        if T == 0:
            raise ValueError("empty token sequence")
        if T > self.cfg.max_context:
            raise ContextOverflowError(f"sequence length {T} > {self.cfg.max_context}")
        p = self._f64()
        cfg = self.cfg
        H, hd = cfg.n_heads, cfg.head_dim
        idx = torch.tensor(ids, dtype=torch.long)
        x = p["wte.weight"][idx] + p["wpe.weight"][:T]
        hidden = torch.empty(cfg.n_taps, T, cfg.d_model, dtype=torch.float64)
        attn = torch.zeros(cfg.n_layers, H, T, T, dtype=torch.float64)
        hidden[0] = x
        mask = torch.tril(torch.ones(T, T, dtype=torch.bool))
        with torch.no_grad():
            for l in range(cfg.n_layers):
                pre = f"blocks.{l}."
                h = F.layer_norm(x, (cfg.d_model,), p[pre + "ln1.weight"], p[pre + "ln1.bias"])
                qkv = h @ p[pre + "attn_qkv.weight"].T + p[pre + "attn_qkv.bias"]
                q, k, v = qkv.split(cfg.d_model, dim=1)
                q = q.view(T, H, hd).transpose(0, 1)
                k = k.view(T, H, hd).transpose(0, 1)
                v = v.view(T, H, hd).transpose(0, 1)
                scores = q @ k.transpose(1, 2) / math.sqrt(hd)
                scores = scores.masked_fill(~mask, float("-inf"))
                weights = torch.softmax(scores, dim=-1)
                attn[l] = weights
                y = (weights @ v).transpose(0, 1).reshape(T, cfg.d_model)
                x = x + y @ p[pre + "attn_proj.weight"].T + p[pre + "attn_proj.bias"]
                h2 = F.layer_norm(x, (cfg.d_model,), p[pre + "ln2.weight"], p[pre + "ln2.bias"])
                m = F.gelu(h2 @ p[pre + "mlp_fc.weight"].T + p[pre + "mlp_fc.bias"])
                x = x + m @ p[pre + "mlp_proj.weight"].T + p[pre + "mlp_proj.bias"]
                hidden[l + 1] = x
            xf = F.layer_norm(x, (cfg.d_model,), p["ln_f.weight"], p["ln_f.bias"])
            logits = xf @ p["wte.weight"].T
        return RepBundle(hidden, attn, logits)

    def init_cache(self, capacity: int | None = None) -> GenerationCache:
        cfg = self.cfg
        cap = cfg.max_context if capacity is None else min(capacity, cfg.max_context)
        shape = (cfg.n_layers, cfg.n_heads, cap, cfg.head_dim)
        return GenerationCache(
            k=torch.zeros(shape, dtype=torch.float64),
            v=torch.zeros(shape, dtype=torch.float64),
            length=0,
            model_id=id(self),
            model_version=self._version,
        )

    def decode_step(self, cache: GenerationCache, token_id: int):
        """Process one token against the cached prefix.

        Returns ``(logits_row [V], hidden_col [n_taps, d], attn_rows
        [L, H, t+1], cache)`` where ``t`` is the new token's position.
        """
        if cache.model_id != id(self) or cache.model_version != self._version:
            raise ConfigError("generation cache does not belong to this model state")
        (token_id,) = _validate_tokens([token_id], self.cfg.vocab_size)
        t = cache.length
        if t >= cache.capacity:
            raise ContextOverflowError(f"cache capacity {cache.capacity} exhausted")
        p = self._f64()
        cfg = self.cfg
        H, hd = cfg.n_heads, cfg.head_dim
        x = p["wte.weight"][token_id] + p["wpe.weight"][t]
        hidden_col = torch.empty(cfg.n_taps, cfg.d_model, dtype=torch.float64)
        attn_rows = torch.empty(cfg.n_layers, H, t + 1, dtype=torch.float64)
        hidden_col[0] = x
        with torch.no_grad():
            for l in range(cfg.n_layers):
                pre = f"blocks.{l}."
                h = F.layer_norm(x, (cfg.d_model,), p[pre + "ln1.weight"], p[pre + "ln1.bias"])
                qkv = h @ p[pre + "attn_qkv.weight"].T + p[pre + "attn_qkv.bias"]
                q, k, v = qkv.split(cfg.d_model, dim=0)
                q = q.view(H, hd)
                cache.k[l, :, t] = k.view(H, hd)
                cache.v[l, :, t] = v.view(H, hd)
                keys = cache.k[l, :, : t + 1]
                values = cache.v[l, :, : t + 1]
                scores = (keys @ q.unsqueeze(-1)).squeeze(-1) / math.sqrt(hd)
                weights = torch.softmax(scores, dim=-1)
                attn_rows[l] = weights
                y = (weights.unsqueeze(1) @ values).squeeze(1).reshape(cfg.d_model)
                x = x + y @ p[pre + "attn_proj.weight"].T + p[pre + "attn_proj.bias"]
                h2 = F.layer_norm(x, (cfg.d_model,), p[pre + "ln2.weight"], p[pre + "ln2.bias"])
                m = F.gelu(h2 @ p[pre + "mlp_fc.weight"].T + p[pre + "mlp_fc.bias"])
                x = x + m @ p[pre + "mlp_proj.weight"].T + p[pre + "mlp_proj.bias"]
                hidden_col[l + 1] = x
            xf = F.layer_norm(x, (cfg.d_model,), p["ln_f.weight"], p["ln_f.bias"])
            logits_row = xf @ p["wte.weight"].T
        cache.length = t + 1
        return logits_row, hidden_col, attn_rows, cache

    def new_bundle(self, capacity: int | None = None) -> GrowableRepBundle:
        cfg = self.cfg
        cap = cfg.max_context if capacity is None else min(capacity, cfg.max_context)
        return GrowableRepBundle(
            cfg.n_taps, cfg.n_layers, cfg.n_heads, cap, cfg.d_model, cfg.vocab_size
        )


def init_model(cfg: ModelConfig) -> TinyDecoderLM:
    """Deterministically initialized model for a validated config."""
    return TinyDecoderLM(cfg)
