"""WordPiece tokenization and teacher-embedding files."""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import read_matrix, write_matrix
from .errors import AlignmentError, DataError, VocabError

CLS, SEP, UNK = "[CLS]", "[SEP]", "[UNK]"
SPECIALS = (CLS, SEP, UNK)
TEACHER_MAGIC = b"TCAB"
MAX_WORD_CHARS = 100

_PUNCT = re.compile(r"[^\w\s']|_")


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    prefix: str = "##"

    def __post_init__(self):
        index = {}
        for i, tok in enumerate(self.tokens):
            if tok in index:
                raise VocabError(f"duplicate token {tok!r} at lines {index[tok]} and {i}")
            index[tok] = i
        missing = [s for s in SPECIALS if s not in index]
        if missing:
            raise VocabError(f"vocabulary lacks special tokens {missing}")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index[token]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    strings: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.ids)


def load_vocab(path) -> Vocab:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return Vocab(tuple(line.strip() for line in lines if line.strip()))


def save_vocab(path, vocab: Vocab) -> None:
    Path(path).write_text("".join(t + "\n" for t in vocab.tokens), encoding="utf-8")


def normalize(text: str) -> list[str]:
    text = unicodedata.normalize("NFKC", text).lower()
    return _PUNCT.sub(" ", text).split()


def wordpiece(word: str, vocab: Vocab) -> list[str]:
    """Greedy longest-match-first split of one word; [UNK] if any piece fails."""
    if len(word) > MAX_WORD_CHARS:
        return [UNK]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while end > start:
            piece = word[start:end]
            if start > 0:
                piece = vocab.prefix + piece
            if piece in vocab:
                match = piece
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces


def tokenize(text: str, vocab: Vocab) -> TokenSequence:
    strings = [CLS]
    for word in normalize(text):
        strings.extend(wordpiece(word, vocab))
    strings.append(SEP)
    return TokenSequence(ids=tuple(vocab.id(s) for s in strings), strings=tuple(strings))


def detokenize(tokens: TokenSequence, prefix: str = "##") -> list[str]:
    """Rebuild the word sequence, dropping specials and [UNK]."""
    words: list[str] = []
    for s in tokens.strings:
        if s in SPECIALS:
            continue
        if s.startswith(prefix) and words:
            words[-1] += s[len(prefix):]
        else:
            words.append(s)
    return words


def save_teacher(path, matrix: np.ndarray) -> None:
    write_matrix(path, TEACHER_MAGIC, matrix)


def load_teacher(path, expected_m: int | None = None) -> np.ndarray:
    """Load an m x d teacher matrix, checking it lines up with the tokenization."""
    matrix = read_matrix(path, TEACHER_MAGIC)
    if not np.all(np.isfinite(matrix)):
        raise DataError(f"{path}: non-finite teacher embedding entries")
    if expected_m is not None and matrix.shape[0] != expected_m:
        raise AlignmentError(
            f"{path}: teacher has {matrix.shape[0]} rows but tokenization has {expected_m}"
        )
    return matrix
