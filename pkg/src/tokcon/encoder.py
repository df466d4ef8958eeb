"""Pyramid BiLSTM speech encoder with a self-attention layer on top."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .core import BiLSTM, LayerNorm, Linear, SelfAttention, dropout
from .errors import ConfigError, InputTooShortError


@dataclass
class EncoderConfig:
    n_mels: int = 80
    n_layers: int = 9
    n_pyramid: int = 3
    hidden: int = 32
    d: int = 64
    n_heads: int = 8
    dropout: float = 0.10

    def validate(self) -> None:
        if not 0 <= self.n_pyramid <= self.n_layers:
            raise ConfigError("n_pyramid must lie in [0, n_layers]")
        if self.n_heads < 1 or self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if min(self.n_mels, self.hidden, self.d) < 1:
            raise ConfigError("encoder widths must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def reduction(self) -> int:
        return 2**self.n_pyramid


def pyramid_reduce(x: torch.Tensor) -> torch.Tensor:
    """Concatenate frame pairs (2t, 2t+1); a trailing odd frame is dropped."""
    n, a = x.shape
    if n < 2:
        raise InputTooShortError(f"pyramid reduction needs at least 2 frames, got {n}")
    half = n // 2
    return x[: 2 * half].reshape(half, 2 * a)


def reduced_length(n: int, n_pyramid: int = 3) -> int:
    for _ in range(n_pyramid):
        n //= 2
    return n


class SpeechEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, generator: torch.Generator):
        super().__init__()
        config.validate()
        self.config = config
        h2 = 2 * config.hidden
        self.lstms = nn.ModuleList()
        self.norms = nn.ModuleList()
        self.residual_proj = nn.ModuleDict()
        width = config.n_mels
        for i in range(config.n_layers):
            self.lstms.append(BiLSTM(width, config.hidden, generator))
            self.norms.append(LayerNorm(h2))
            if width != h2:
                self.residual_proj[str(i)] = Linear(width, h2, generator, bias=False)
            width = 2 * h2 if i < config.n_pyramid else h2
        self.proj = Linear(width, config.d, generator)
        self.attn = SelfAttention(config.d, config.n_heads, generator)
        self.attn_norm = LayerNorm(config.d)

    def forward(self, features: torch.Tensor, training: bool = False,
                generator: torch.Generator | None = None) -> torch.Tensor:
        """Map (n, n_mels) features to an (n', d) representation."""
        cfg = self.config
        if features.shape[0] < cfg.reduction:
            raise InputTooShortError(
                f"{features.shape[0]} frames is too short for a x{cfg.reduction} reduction"
            )
        x = features
        for i, (lstm, norm) in enumerate(zip(self.lstms, self.norms)):
            y = lstm(x)
            residual = self.residual_proj[str(i)](x) if str(i) in self.residual_proj else x
            x = dropout(norm(residual, y), cfg.dropout, training, generator)
            if i < cfg.n_pyramid:
                x = pyramid_reduce(x)
        x = dropout(self.proj(x), cfg.dropout, training, generator)
        return self.attn_norm(x, self.attn(x))


def encode(features, encoder: SpeechEncoder, training: bool = False, seed: int | None = None):
    generator = None
    if training:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    return encoder(features, training=training, generator=generator)
