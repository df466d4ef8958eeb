"""Differentiable primitives on torch tensors.

The layers here wrap torch autograd; each functional op validates shapes and
raises the package's own errors so callers never see bare torch exceptions.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigError, ShapeError

LN_EPS = 1e-5


def linear(x: torch.Tensor, W: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"cannot multiply {tuple(x.shape)} by {tuple(W.shape)}")
    out = x @ W
    if bias is not None:
        if bias.shape != (W.shape[1],):
            raise ShapeError(f"bias of shape {tuple(bias.shape)} for output width {W.shape[1]}")
        out = out + bias
    return out


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    shifted = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def layer_norm_residual(x, sublayer_out, gain, bias, eps: float = LN_EPS):
    """LayerNorm(x + sublayer_out) over the last axis."""
    if x.shape != sublayer_out.shape:
        raise ShapeError(f"residual shapes differ: {tuple(x.shape)} vs {tuple(sublayer_out.shape)}")
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer norm needs at least two features")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},)")
    h = x + sublayer_out
    mu = h.mean(dim=-1, keepdim=True)
    var = ((h - mu) ** 2).mean(dim=-1, keepdim=True)
    return (h - mu) / torch.sqrt(var + eps) * gain + bias


def dropout(x: torch.Tensor, rate: float, training: bool, generator: torch.Generator | None = None):
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


def bilstm_layer(x: torch.Tensor, lstm: nn.LSTM) -> torch.Tensor:
    """Run a bidirectional LSTM over an (n, a) sequence, returning (n, 2h)."""
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"BiLSTM expects a non-empty (n, a) sequence, got {tuple(x.shape)}")
    if x.shape[1] != lstm.input_size:
        raise ShapeError(f"BiLSTM input width {x.shape[1]} != {lstm.input_size}")
    out, _ = lstm(x.unsqueeze(1))  # (seq, batch=1, feat)
    return out.squeeze(1)


def multi_head_self_attention(x, Wq, Wk, Wv, Wo, n_heads: int) -> torch.Tensor:
    """Scaled dot-product self-attention over an (n, d) sequence."""
    n, d = x.shape
    if n_heads < 1 or d % n_heads:
        raise ConfigError(f"width {d} is not divisible by {n_heads} heads")
    dh = d // n_heads

    def heads(t):
        return t.reshape(n, n_heads, dh).transpose(0, 1)

    q, k, v = heads(linear(x, Wq)), heads(linear(x, Wk)), heads(linear(x, Wv))
    weights = softmax_rows(q @ k.transpose(1, 2) / math.sqrt(dh))
    ctx = (weights @ v).transpose(0, 1).reshape(n, d)
    return linear(ctx, Wo)


def uniform_(t: torch.Tensor, fan_in: int, generator: torch.Generator) -> torch.Tensor:
    k = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        t.uniform_(-k, k, generator=generator)
    return t


class Linear(nn.Module):
    def __init__(self, n_in: int, n_out: int, generator: torch.Generator, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(uniform_(torch.empty(n_in, n_out), n_in, generator))
        self.bias = nn.Parameter(uniform_(torch.empty(n_out), n_in, generator)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x, sublayer_out):
        return layer_norm_residual(x, sublayer_out, self.gain, self.bias)


class BiLSTM(nn.Module):
    def __init__(self, n_in: int, hidden: int, generator: torch.Generator):
        super().__init__()
        self.lstm = nn.LSTM(n_in, hidden, bidirectional=True)
        for name, p in self.lstm.named_parameters():
            uniform_(p, hidden, generator)
            if name.startswith("bias_ih"):
                with torch.no_grad():
                    p[hidden : 2 * hidden] = 1.0  # forget gate; gate order is i, f, g, o
            elif name.startswith("bias_hh"):
                with torch.no_grad():
                    p[hidden : 2 * hidden] = 0.0

    def forward(self, x):
        return bilstm_layer(x, self.lstm)


class SelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int, generator: torch.Generator):
        super().__init__()
        if d % n_heads:
            raise ConfigError(f"width {d} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.wq, self.wk, self.wv, self.wo = (
            nn.Parameter(uniform_(torch.empty(d, d), d, generator)) for _ in range(4)
        )

    def forward(self, x):
        return multi_head_self_attention(x, self.wq, self.wk, self.wv, self.wo, self.n_heads)
