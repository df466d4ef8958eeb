"""Symmetric InfoNCE over batch-concatenated token rows."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError, DegenerateEmbeddingError, ShapeError

NORM_FLOOR = 1e-12


@dataclass
class BatchConcat:
    """Row-aligned teacher and speech-side token embeddings for a batch.

    ``offsets[k]`` is the first row of utterance k; the last entry equals b.
    """

    teacher: torch.Tensor
    speech: torch.Tensor
    offsets: list[int]

    @classmethod
    def from_pairs(cls, pairs) -> "BatchConcat":
        teachers, speeches, offsets = [], [], [0]
        for teacher, speech in pairs:
            if teacher.shape != speech.shape:
                raise ShapeError(
                    f"teacher {tuple(teacher.shape)} and speech {tuple(speech.shape)} rows differ"
                )
            teachers.append(teacher)
            speeches.append(speech)
            offsets.append(offsets[-1] + teacher.shape[0])
        return cls(torch.cat(teachers), torch.cat(speeches), offsets)

    @property
    def b(self) -> int:
        return self.offsets[-1]

    @property
    def n_utterances(self) -> int:
        return len(self.offsets) - 1

    def cls_rows(self) -> "BatchConcat":
        idx = self.offsets[:-1]
        return BatchConcat(self.teacher[idx], self.speech[idx], list(range(len(idx) + 1)))


def cosine_sim_matrix(B: torch.Tensor, Bs: torch.Tensor, tau: float) -> torch.Tensor:
    """s[i, j] = <B_i, Bs_j> / (tau |B_i| |Bs_j|)."""
    if B.ndim != 2 or B.shape[1] != Bs.shape[1]:
        raise ShapeError(f"cannot compare {tuple(B.shape)} with {tuple(Bs.shape)}")
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    nb, ns = B.norm(dim=1), Bs.norm(dim=1)
    if float(nb.detach().min()) < NORM_FLOOR or float(ns.detach().min()) < NORM_FLOOR:
        raise DegenerateEmbeddingError("embedding row with (near) zero norm")
    return (B @ Bs.T) / (tau * nb[:, None] * ns[None, :])


def symmetric_info_nce(s: torch.Tensor, tau: float, scale_by_tau: bool = True) -> torch.Tensor:
    b = s.shape[0]
    diag = torch.arange(b)
    rows = torch.log_softmax(s, dim=1)[diag, diag]
    cols = torch.log_softmax(s, dim=0)[diag, diag]
    weight = tau if scale_by_tau else 1.0
    return -(weight / (2 * b)) * (rows + cols).sum()


def tokenwise_contrastive_loss(batch_or_teacher, speech=None, tau: float = 0.07,
                               scale_by_tau: bool = True) -> torch.Tensor:
    """Tokenwise loss on a BatchConcat or on two already-concatenated b x d matrices."""
    if isinstance(batch_or_teacher, BatchConcat):
        B, Bs = batch_or_teacher.teacher, batch_or_teacher.speech
    else:
        B, Bs = batch_or_teacher, speech
    if B.shape != Bs.shape:
        raise ShapeError(f"teacher {tuple(B.shape)} and speech {tuple(Bs.shape)} differ")
    if B.shape[0] < 1:
        raise ShapeError("empty batch")
    return symmetric_info_nce(cosine_sim_matrix(B, Bs, tau), tau, scale_by_tau)


def sequence_contrastive_loss(pooled_speech: torch.Tensor, teacher_cls: torch.Tensor,
                              tau: float = 0.07, scale_by_tau: bool = True) -> torch.Tensor:
    """Utterance-level variant: one pooled speech row against one teacher [CLS] row."""
    return tokenwise_contrastive_loss(teacher_cls, pooled_speech, tau, scale_by_tau)
