"""Model architecture configuration."""

from __future__ import annotations

from dataclasses import dataclass, asdict

from ..errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the tiny pre-norm decoder-only transformer."""

    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    vocab_size: int = 256
    max_context: int = 256
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.n_heads < 1:
            raise ConfigError("n_heads must be >= 1")
        if self.d_model < 1 or self.d_ff < 1 or self.vocab_size < 1:
            raise ConfigError("dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.max_context < 2:
            raise ConfigError("max_context must be >= 2")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_taps(self) -> int:
        """Probe-visible sublayers: embedding output plus each block output."""
        return self.n_layers + 1

    def as_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**{k: int(d[k]) for k in (
            "n_layers", "n_heads", "d_model", "d_ff",
            "vocab_size", "max_context", "seed",
        )})
