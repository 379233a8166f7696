"""Versioned binary checkpoint container.

Byte layout (all integers little-endian)::

    b"deoccl-ckpt v1\\n"                 15-byte magic line
    uint64  L                            length of the metadata block
    L bytes UTF-8 JSON metadata          sort_keys, compact separators
    payload                              raw tensor bytes, back to back
    32 bytes SHA-256                     digest of everything above

The metadata holds ``network`` (NetworkConfig fields), ``train`` (the
training config and cursor, free-form JSON) and ``tensors``: a list of
``{"name", "dtype", "shape", "offset", "nbytes"}`` entries whose offsets are
relative to the start of the payload.  Parameters and optimizer moments are
stored as float32; integer buffers (batch-norm counters) as int64.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"deoccl-ckpt v1\n"
_DTYPES = {"float32": (np.float32, torch.float32), "int64": (np.int64, torch.int64)}


class CheckpointError(Exception):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    pass


def _dtype_name(t: torch.Tensor) -> str:
    return "float32" if t.is_floating_point() else "int64"


def write_container(path: str | Path, meta: dict, tensors: dict[str, torch.Tensor]) -> None:
    entries, chunks, offset = [], [], 0
    for name in tensors:
        t = tensors[name].detach().cpu()
        kind = _dtype_name(t)
        arr = t.numpy().astype(_DTYPES[kind][0], copy=False)
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": kind, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    meta = dict(meta, tensors=entries)
    head = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)


def read_container(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        first = data.split(b"\n", 1)[0][:40]
        if first.startswith(b"deoccl-ckpt"):
            raise VersionMismatch(f"{path}: unsupported checkpoint version {first.decode(errors='replace')!r}")
        raise CorruptCheckpoint(f"{path}: not a deoccl checkpoint")
    if len(data) < len(MAGIC) + 8 + 32:
        raise CorruptCheckpoint(f"{path}: truncated")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint(f"{path}: checksum mismatch (truncated or corrupted)")
    (n,) = struct.unpack_from("<Q", body, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        meta = json.loads(body[start : start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: bad metadata: {exc}") from exc
    payload = body[start + n :]
    tensors = {}
    for e in meta.pop("tensors"):
        np_dtype, torch_dtype = _DTYPES[e["dtype"]]
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CorruptCheckpoint(f"{path}: tensor {e['name']} truncated")
        arr = np.frombuffer(raw, dtype=np.dtype(np_dtype).newbyteorder("<")).astype(np_dtype)
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy()).to(torch_dtype)
    return meta, tensors


def check_shapes(expected: dict[str, torch.Tensor], loaded: dict[str, torch.Tensor], what: str) -> None:
    missing = sorted(set(expected) - set(loaded))
    extra = sorted(set(loaded) - set(expected))
    if missing or extra:
        raise ShapeMismatch(f"{what}: missing {missing[:3]} unexpected {extra[:3]}")
    for name, t in expected.items():
        if tuple(t.shape) != tuple(loaded[name].shape):
            raise ShapeMismatch(
                f"{what}: {name} has shape {tuple(loaded[name].shape)}, config expects {tuple(t.shape)}"
            )
