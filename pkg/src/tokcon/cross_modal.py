"""Non-contextual token embeddings and speech-conditioned cross attention."""

from __future__ import annotations

import math
import numpy as np
import torch
from torch import nn

from .core import linear, softmax_rows, uniform_
from .errors import ShapeError, VocabError


def sinusoidal_positions(m: int, d: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed absolute encodings: sin on even dims, cos on odd dims."""
    pos = torch.arange(m, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(m, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(dtype)


def nc_embed(ids, table: torch.Tensor) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise VocabError(f"token id out of range for a {table.shape[0]}-row table")
    return table[ids] + sinusoidal_positions(len(ids), table.shape[1], table.dtype)


def cross_attend(T: torch.Tensor, S: torch.Tensor, Wq, Wk, Wv, scale: bool = False):
    """Return (B_s, A) with A = softmax(Q K^T) and B_s = A V.

    Logits are unscaled by default; ``scale`` divides by sqrt(d).
    """
    if T.ndim != 2 or S.ndim != 2 or T.shape[1] != S.shape[1]:
        raise ShapeError(f"query {tuple(T.shape)} and speech {tuple(S.shape)} widths differ")
    Q, K, V = linear(T, Wq), linear(S, Wk), linear(S, Wv)
    logits = Q @ K.T
    if scale:
        logits = logits / math.sqrt(Q.shape[1])
    A = softmax_rows(logits)
    return A @ V, A


class CrossModal(nn.Module):
    def __init__(self, vocab_size: int, d: int, generator: torch.Generator, scale: bool = False):
        super().__init__()
        self.scale = scale
        table = torch.empty(vocab_size, d)
        with torch.no_grad():
            table.normal_(0.0, 0.02, generator=generator)
        self.table = nn.Parameter(table)
        self.wq, self.wk, self.wv = (
            nn.Parameter(uniform_(torch.empty(d, d), d, generator)) for _ in range(3)
        )

    def embed(self, ids) -> torch.Tensor:
        return nc_embed(ids, self.table)

    def forward(self, ids, S: torch.Tensor):
        return cross_attend(self.embed(ids), S, self.wq, self.wk, self.wv, self.scale)

    def cls_row(self, cls_id: int) -> torch.Tensor:
        return self.embed([cls_id])

    def cls_only(self, cls_id: int, S: torch.Tensor) -> torch.Tensor:
        return cls_only_forward(self.cls_row(cls_id), S, self.wq, self.wk, self.wv, self.scale)


def cls_only_forward(cls_row: torch.Tensor, S: torch.Tensor, Wq, Wk, Wv, scale: bool = False):
    if cls_row.ndim == 1:
        cls_row = cls_row[None, :]
    if cls_row.shape[0] != 1:
        raise ShapeError("the [CLS] path takes exactly one query row")
    return cross_attend(cls_row, S, Wq, Wk, Wv, scale)[0]


def write_attention_csv(path, A: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in np.asarray(A, dtype=np.float64):
            fh.write(",".join(f"{v:.6f}" for v in row) + "\n")


def write_attention_pgm(path, A: np.ndarray) -> None:
    """Binary 8-bit PGM with the largest weight mapped to 255."""
    A = np.asarray(A, dtype=np.float64)
    peak = A.max() if A.size and A.max() > 0 else 1.0
    pixels = np.clip(np.round(A / peak * 255.0), 0, 255).astype(np.uint8)
    rows, cols = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())

