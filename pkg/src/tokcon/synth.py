"""Synthetic speech/text/teacher suite with a known token-to-frame alignment.

Every token type owns a fixed random spectral pattern of 8-24 frames. An
utterance concatenates the patterns of 2-6 distinct tokens (exactly one of
which is an intent keyword) and adds Gaussian noise. Teacher rows mix an orthonormal
per-type vector with an utterance context vector and a small positional
perturbation, so identical token types in different utterances stay
distinguishable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import save_features
from .encoder import reduced_length
from .errors import ConfigError
from .text import SPECIALS, Vocab, save_teacher, save_vocab, tokenize

CONTEXT_WEIGHT = 0.6
SPECIAL_CONTEXT_WEIGHT = 1.0
POSITION_WEIGHT = 0.3
MAX_POSITIONS = 16


@dataclass
class SynthUtterance:
    uid: str
    words: list[str]
    features: np.ndarray
    teacher: np.ndarray
    label: str
    spans: list[int | None]
    split: str

    @property
    def transcript(self) -> str:
        return " ".join(self.words)


@dataclass
class SynthSuite:
    vocab: Vocab
    utterances: list[SynthUtterance]
    type_vectors: np.ndarray
    labels: list[str] = field(default_factory=list)


def word(k: int) -> str:
    return f"w{k:02d}"


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _basis(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    """n unit vectors in R^d, mutually orthogonal when n <= d."""
    if n <= d:
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        return q[:, :n].T.copy()
    return _unit_rows(rng.standard_normal((n, d)))


def generate_suite(n_utterances: int = 200, seed: int = 7, n_types: int = 16, n_intents: int = 4,
                   d: int = 64, n_mels: int = 80, noise: float = 0.1, val_fraction: float = 0.2,
                   min_tokens: int = 2, max_tokens: int = 6, reduction: int = 8,
                   context_weight: float = CONTEXT_WEIGHT,
                   position_weight: float = POSITION_WEIGHT) -> SynthSuite:
    """Build the suite; ``noise`` only affects the additive feature noise."""
    if n_types - n_intents < max_tokens - 1:
        raise ConfigError(f"{n_types - n_intents} filler types cannot fill {max_tokens}-token utterances")
    if not 1 <= min_tokens <= max_tokens or n_intents < 1:
        raise ConfigError("need 1 <= min_tokens <= max_tokens and n_intents >= 1")
    rng = np.random.default_rng([seed, 0])
    noise_rng = np.random.default_rng([seed, 1])

    lengths = rng.integers(8, 25, size=n_types)
    patterns = [rng.standard_normal((int(n), n_mels)) for n in lengths]
    vectors = _basis(rng, 2 * n_types + 2, d)
    type_vecs, ctx_vecs = vectors[:n_types], vectors[n_types : 2 * n_types]
    cls_vec, sep_vec = vectors[2 * n_types], vectors[2 * n_types + 1]
    positions = _unit_rows(rng.standard_normal((MAX_POSITIONS, d)))

    vocab = Vocab(SPECIALS + tuple(word(k) for k in range(n_types)))
    labels = [f"intent{k}" for k in range(n_intents)]
    n_val = int(round(val_fraction * n_utterances))

    utterances = []
    for u in range(n_utterances):
        n_tok = int(rng.integers(min_tokens, max_tokens + 1))
        intent = int(rng.integers(0, n_intents))
        types = [int(k) for k in rng.choice(np.arange(n_intents, n_types), size=n_tok - 1,
                                            replace=False)]
        types.insert(int(rng.integers(0, n_tok)), intent)

        frames, spans, start = [], [None], 0
        for k in types:
            frames.append(patterns[k])
            spans.append(start + lengths[k] // 2)
            start += int(lengths[k])
        feats = np.concatenate(frames) + noise * noise_rng.standard_normal((start, n_mels))
        n_red = reduced_length(start, int(np.log2(reduction)))
        spans = [None if c is None else min(int(c) // reduction, n_red - 1) for c in spans]
        spans.append(None)

        context = _unit_rows(ctx_vecs[types].sum(axis=0))
        rows = [cls_vec + SPECIAL_CONTEXT_WEIGHT * context]
        for p, k in enumerate(types, start=1):
            rows.append(type_vecs[k] + context_weight * context
                        + position_weight * positions[p % MAX_POSITIONS])
        rows.append(sep_vec + SPECIAL_CONTEXT_WEIGHT * context
                    + position_weight * positions[(n_tok + 1) % MAX_POSITIONS])
        teacher = _unit_rows(np.stack(rows))

        utterances.append(SynthUtterance(
            uid=f"utt{u:05d}",
            words=[word(k) for k in types],
            features=feats.astype(np.float32),
            teacher=teacher.astype(np.float32),
            label=labels[intent],
            spans=spans,
            split="val" if u >= n_utterances - n_val else "train",
        ))
    return SynthSuite(vocab=vocab, utterances=utterances, type_vectors=type_vecs, labels=labels)


def type_mean_rows(suite: SynthSuite) -> dict[str, np.ndarray]:
    """Mean teacher row per token string over the whole suite."""
    sums: dict[str, list[np.ndarray]] = {}
    for utt in suite.utterances:
        tokens = tokenize(utt.transcript, suite.vocab).strings
        for tok, row in zip(tokens, utt.teacher):
            sums.setdefault(tok, []).append(row.astype(np.float64))
    return {tok: np.mean(rows, axis=0) for tok, rows in sums.items()}


def write_suite(out_dir, suite: SynthSuite) -> Path:
    """Write features, teacher files, vocab, manifest and spans; returns the manifest path."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "teacher").mkdir(parents=True, exist_ok=True)
    save_vocab(out / "vocab.txt", suite.vocab)
    manifest_lines, span_lines = [], []
    for utt in suite.utterances:
        feat_rel = f"features/{utt.uid}.tcaf"
        teach_rel = f"teacher/{utt.uid}.tcab"
        save_features(out / feat_rel, utt.features)
        save_teacher(out / teach_rel, utt.teacher)
        manifest_lines.append(json.dumps({
            "utterance_id": utt.uid,
            "feature_path": feat_rel,
            "transcript": utt.transcript,
            "teacher_path": teach_rel,
            "intent_label": utt.label,
            "split": utt.split,
        }))
        span_lines.append(json.dumps({"utterance_id": utt.uid, "spans": utt.spans}))
    (out / "manifest.jsonl").write_text("\n".join(manifest_lines) + "\n")
    (out / "spans.jsonl").write_text("\n".join(span_lines) + "\n")
    (out / "labels.txt").write_text("".join(l + "\n" for l in suite.labels))
    return out / "manifest.jsonl"
