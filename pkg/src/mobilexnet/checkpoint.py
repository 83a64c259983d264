"""Binary checkpoint container.

Layout (little-endian throughout)::

    b"MXNT"  u32 version  u32 meta_len  meta (UTF-8 JSON, sorted keys)
    u32 n_tensors
    n_tensors x { u16 name_len  name  u8 ndim  ndim x u32 dims  float32 payload }

Tensors are written in insertion order, metadata with sorted keys, so
save -> load -> save reproduces the same bytes.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

MAGIC = b"MXNT"
VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    def __init__(self, name: str, got, expected):
        super().__init__(f"tensor {name!r}: checkpoint has shape {tuple(got)}, model expects {tuple(expected)}")
        self.name = name


@dataclass
class Checkpoint:
    metadata: dict = field(default_factory=dict)
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta,
               struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            if not np.issubdtype(arr.dtype, np.floating):
                raise TypeError(f"tensor {name!r} is not floating point")
            key = name.encode("utf-8")
            out.append(struct.pack("<H", len(key)) + key)
            out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        r = _Reader(buf)
        if r.take(4, "magic") != MAGIC:
            raise BadMagicError("not a checkpoint file (bad magic)")
        version, meta_len = r.unpack("<II", "header")
        if version != VERSION:
            raise UnsupportedVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
        try:
            metadata = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptCheckpointError(f"metadata is not valid JSON: {exc}") from exc
        (n,) = r.unpack("<I", "tensor count")
        tensors = OrderedDict()
        for _ in range(n):
            (klen,) = r.unpack("<H", "name length")
            name = r.take(klen, "name").decode("utf-8", errors="strict")
            (ndim,) = r.unpack("<B", "rank")
            dims = r.unpack(f"<{ndim}I", "dims")
            size = int(np.prod(dims, dtype=np.int64))
            payload = r.take(4 * size, f"payload of {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
        if r.pos != len(buf):
            raise CorruptCheckpointError(f"{len(buf) - r.pos} trailing bytes")
        return cls(metadata, tensors)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(f"file truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return Checkpoint.from_bytes(buf)


# -- model helpers ------------------------------------------------------------------

def model_checkpoint(model, extra_meta: Optional[dict] = None,
                     extra_tensors: Optional[Dict[str, np.ndarray]] = None) -> Checkpoint:
    meta = {"architecture": model.config.to_dict(), "normalization": "unit_range"}
    meta.update(extra_meta or {})
    tensors = OrderedDict((n, np.array(a, dtype=np.float32)) for n, a in model.state_dict().items())
    for n, a in (extra_tensors or {}).items():
        tensors[n] = np.array(a, dtype=np.float32)
    return Checkpoint(meta, tensors)


def save(model, path, extra_meta: Optional[dict] = None, extra_tensors=None) -> None:
    save_checkpoint(model_checkpoint(model, extra_meta, extra_tensors), path)


def apply_weights(model, ckpt: Checkpoint) -> None:
    """Copy model tensors from ``ckpt``; shape mismatches name the tensor."""
    own = model.state_dict()
    for name, arr in own.items():
        if name not in ckpt.tensors:
            raise CorruptCheckpointError(f"checkpoint lacks tensor {name!r}")
        src = ckpt.tensors[name]
        if src.shape != arr.shape:
            raise CheckpointShapeError(name, src.shape, arr.shape)
    for name, arr in own.items():
        arr[...] = ckpt.tensors[name]


def load_model(path):
    """Rebuild the architecture recorded in the metadata and load weights."""
    from .model import ArchitectureConfig, build

    ckpt = load_checkpoint(path)
    try:
        cfg = ArchitectureConfig.from_dict(ckpt.metadata["architecture"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"bad architecture metadata: {exc}") from exc
    model = build(cfg)
    apply_weights(model, ckpt)
    return model, ckpt
