"""Flat, versioned binary container of named float64 tensors.

Layout (all integers little-endian)::

    magic      4 bytes  b"GMCP"
    version    u32      currently 1
    meta_len   u32      length of the UTF-8 JSON metadata (sorted keys)
    meta       bytes
    count      u32      number of tensors
    per tensor, in sorted name order:
        name_len u16, name (UTF-8), ndim u8, shape u64 * ndim,
        data     float64 little-endian, C order

Parameter names carry a ``marginal.`` or ``copula.`` namespace prefix. Writing
the same tensors and metadata always yields the same bytes.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"GMCP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(tensors: dict, meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(torch.as_tensor(tensors[name]).detach().cpu().numpy(), dtype="<f8", order="C")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode(buf: bytes):
    """Returns ``(tensors, meta)``; raises ``CheckpointError`` on any malformed input."""
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(bytes(take(meta_len)).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape)
        tensors[name] = torch.from_numpy(data.astype(np.float64))
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors, meta


def save(path, tensors: dict, meta: dict | None = None):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors, meta))
    os.replace(tmp, path)


def load(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    return decode(path.read_bytes())


def model_tensors(model) -> dict:
    """Namespaced state of a ``JointModel`` (``marginal.*`` and, if present, ``copula.*``)."""
    return {k: v for k, v in model.state_dict().items()}


def save_model(path, model, meta: dict | None = None):
    save(path, model_tensors(model), meta)


def load_state(model, tensors: dict, strict: bool = True):
    """Load namespaced tensors into ``model``; with ``strict=False`` a missing copula is allowed."""
    own = model.state_dict()
    missing = [k for k in own if k not in tensors]
    unexpected = [k for k in tensors if k not in own]
    if unexpected or (missing and (strict or any(not k.startswith("copula.") for k in missing))):
        raise CheckpointError(f"checkpoint does not match model: missing {missing[:3]}, unexpected {unexpected[:3]}")
    for k, v in tensors.items():
        if own[k].shape != v.shape:
            raise CheckpointError(f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(own[k].shape)}")
    model.load_state_dict({**own, **tensors})
