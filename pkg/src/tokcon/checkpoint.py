"""TCAC checkpoint files.

Layout: ``TCAC``, u32 version, u32 metadata length, UTF-8 JSON metadata,
u32 tensor count, then per tensor: u32 name length, name, u32 ndim, u32 dims,
row-major float32 little-endian data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError

MAGIC = b"TCAC"
VERSION = 1


def save_tensors(path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        enc = name.encode("utf-8")
        parts.append(struct.pack("<I", len(enc)) + enc)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> tuple[dict[str, torch.Tensor], dict]:
    raw = Path(path).read_bytes()
    try:
        if raw[:4] != MAGIC:
            raise FormatError(f"{path}: not a TCAC checkpoint")
        version, meta_len = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        meta = json.loads(raw[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
            pos += 4 + 4 * ndim
            size = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + size > len(raw):
                raise FormatError(f"{path}: tensor {name!r} is truncated")
            arr = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=pos).reshape(shape)
            tensors[name] = torch.from_numpy(arr.copy())
            pos += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    return tensors, meta


def save_checkpoint(path, model: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None,
                    meta: dict | None = None) -> None:
    tensors = {f"param.{k}": v for k, v in model.state_dict().items()}
    meta = dict(meta or {})
    if optimizer is not None:
        names = {id(p): k for k, p in model.named_parameters()}
        steps = {}
        for p, state in optimizer.state.items():
            key = names[id(p)]
            tensors[f"optim.{key}.exp_avg"] = state["exp_avg"]
            tensors[f"optim.{key}.exp_avg_sq"] = state["exp_avg_sq"]
            steps[key] = int(state["step"])
        meta["optimizer_steps"] = steps
    save_tensors(path, tensors, meta)


def load_checkpoint(path, model: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None,
                    strict: bool = True) -> dict:
    tensors, meta = load_tensors(path)
    state = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if strict and (missing or unexpected):
        raise FormatError(f"{path}: parameter mismatch (missing {missing}, unexpected {unexpected})")
    if optimizer is not None and "optimizer_steps" in meta:
        params = dict(model.named_parameters())
        for key, step in meta["optimizer_steps"].items():
            p = params[key]
            optimizer.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": tensors[f"optim.{key}.exp_avg"].to(p.dtype).clone(),
                "exp_avg_sq": tensors[f"optim.{key}.exp_avg_sq"].to(p.dtype).clone(),
            }
    return meta
