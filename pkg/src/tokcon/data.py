"""JSON-lines manifests and in-memory utterance records."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import load_features
from .errors import AlignmentError, ConfigError, DataError, TokconError
from .text import Vocab, load_teacher, tokenize

KNOWN_FIELDS = {"utterance_id", "audio_path", "feature_path", "transcript", "teacher_path",
                "intent_label", "split"}


@dataclass
class ManifestRecord:
    utterance_id: str
    transcript: str = ""
    audio_path: str | None = None
    feature_path: str | None = None
    teacher_path: str | None = None
    intent_label: str | None = None
    split: str | None = None


@dataclass
class Utterance:
    uid: str
    features: np.ndarray
    token_ids: tuple[int, ...] = ()
    teacher: np.ndarray | None = None
    label: int | None = None
    spans: list | None = None


def load_manifest(path, check_files: bool = True) -> list[ManifestRecord]:
    path = Path(path)
    records, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
        unknown = set(raw) - KNOWN_FIELDS
        if unknown:
            raise DataError(f"{path}:{lineno}: unknown fields {sorted(unknown)}")
        if "utterance_id" not in raw:
            raise DataError(f"{path}:{lineno}: missing utterance_id")
        rec = ManifestRecord(**raw)
        if rec.utterance_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate utterance_id {rec.utterance_id!r}")
        seen.add(rec.utterance_id)
        if (rec.audio_path is None) == (rec.feature_path is None):
            raise DataError(f"{rec.utterance_id}: give exactly one of audio_path / feature_path")
        for attr in ("audio_path", "feature_path", "teacher_path"):
            value = getattr(rec, attr)
            if value is not None:
                resolved = Path(value) if Path(value).is_absolute() else path.parent / value
                if check_files and not resolved.exists():
                    raise DataError(f"{rec.utterance_id}: {attr} {resolved} does not exist")
                setattr(rec, attr, str(resolved))
        records.append(rec)
    return records


def write_manifest(path, records: list[ManifestRecord]) -> None:
    lines = [json.dumps({k: v for k, v in vars(r).items() if v is not None}) for r in records]
    Path(path).write_text("".join(l + "\n" for l in lines))


def load_spans(path) -> dict[str, list]:
    spans = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            entry = json.loads(line)
            spans[entry["utterance_id"]] = entry["spans"]
    return spans


def label_index(records, labels: list[str] | None = None) -> dict[str, int]:
    if labels is None:
        labels = sorted({r.intent_label for r in records if r.intent_label is not None})
    return {name: i for i, name in enumerate(labels)}


def load_utterances(records, vocab: Vocab | None = None, with_teacher: bool = False,
                    labels: dict[str, int] | None = None, spans: dict | None = None,
                    split: str | None = None) -> list[Utterance]:
    """Materialize manifest records; audio records must be featurized first."""
    out = []
    for rec in records:
        if split is not None and rec.split != split:
            continue
        if rec.feature_path is None:
            raise DataError(f"{rec.utterance_id}: no feature_path (run featurize first)")
        try:
            feats = load_features(rec.feature_path)
        except TokconError as exc:
            raise DataError(f"{rec.utterance_id}: {exc}") from exc
        utt = Utterance(uid=rec.utterance_id, features=feats)
        if vocab is not None:
            utt.token_ids = tokenize(rec.transcript, vocab).ids
        if with_teacher:
            if rec.teacher_path is None:
                raise DataError(f"{rec.utterance_id}: no teacher_path")
            try:
                utt.teacher = load_teacher(rec.teacher_path, len(utt.token_ids))
            except AlignmentError as exc:
                raise AlignmentError(f"{rec.utterance_id}: {exc}") from exc
        if labels is not None:
            if rec.intent_label is None:
                raise ConfigError(f"{rec.utterance_id}: missing intent_label")
            if rec.intent_label not in labels:
                raise ConfigError(f"{rec.utterance_id}: unknown intent {rec.intent_label!r}")
            utt.label = labels[rec.intent_label]
        if spans is not None:
            utt.spans = spans.get(rec.utterance_id)
        out.append(utt)
    return out
