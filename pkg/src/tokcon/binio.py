"""Little-endian binary containers shared by the feature, stats, teacher and
checkpoint files."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

_F32 = np.dtype("<f4")


def write_matrix(path, magic: bytes, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype=_F32)
    if matrix.ndim != 2:
        raise FormatError(f"expected a 2-D matrix, got shape {matrix.shape}")
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(matrix.tobytes())


def read_matrix(path, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != magic:
        raise FormatError(f"{path}: missing {magic.decode()} header")
    rows, cols = struct.unpack_from("<II", raw, 4)
    body = raw[12:]
    if len(body) != rows * cols * 4:
        raise FormatError(
            f"{path}: expected {rows}x{cols} floats, found {len(body)} bytes"
        )
    return np.frombuffer(body, dtype=_F32).reshape(rows, cols).copy()
