"""Named-tensor binary checkpoints.

Layout (all integers little-endian)::

    b"TADF" | u32 version | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u32 rank | u64 extents... | f32 data

Tensors are written in the order given and read back in the same order.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from .errors import CheckpointCorruptionError, CheckpointError, CheckpointVersionError, NumericalError
from .tensor import Tensor

MAGIC = b"TADF"
VERSION = 1


def to_bytes(tensors) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        arr = np.asarray(arr, dtype="<f4", order="C")
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"refusing to write non-finite tensor {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointCorruptionError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    r = _Reader(memoryview(buf))
    if bytes(r.take(4, "magic")) != MAGIC:
        raise CheckpointError("not a TADF checkpoint (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    (count,) = r.unpack("<I", "tensor count")
    out = OrderedDict()
    for i in range(count):
        (nlen,) = r.unpack("<I", f"name length of tensor {i}")
        try:
            name = bytes(r.take(nlen, f"name of tensor {i}")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointCorruptionError(f"tensor {i} name is not UTF-8", r.pos - nlen) from exc
        (rank,) = r.unpack("<I", f"rank of {name!r}")
        shape = r.unpack(f"<{rank}Q", f"extents of {name!r}")
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(r.take(4 * n, f"data of {name!r}"), dtype="<f4")
        out[name] = data.astype(np.float32).reshape(shape)
    if r.pos != len(buf):
        raise CheckpointCorruptionError("trailing bytes after last tensor", r.pos)
    return out


def write_checkpoint(path, tensors) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(tensors))


def read_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def save_model(path, model) -> None:
    write_checkpoint(path, model.params)


def load_model(path, cfg, mode):
    """Rebuild a model from a checkpoint, checking it matches ``cfg``/``mode``."""
    from .model import TADFormer, init_params
    from .peft import configure_trainable_set

    stored = read_checkpoint(path)
    expected = init_params(cfg, mode)
    for name, t in expected.items():
        if name not in stored:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if stored[name].shape != t.shape:
            raise CheckpointError(f"tensor {name!r} has shape {stored[name].shape}, expected {t.shape}")
    for name in stored:
        if name not in expected:
            raise CheckpointError(f"checkpoint has unexpected tensor {name!r}")
    params = OrderedDict((name, Tensor(stored[name])) for name in expected)
    model = TADFormer(cfg, mode, params=params)
    model.trainable = configure_trainable_set(mode, model)
    return model
