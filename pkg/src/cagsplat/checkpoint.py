"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"CAGS" | u32 version | u32 n_tensors | tensor * n
    adam:   u64 step | f64 beta1 | f64 beta2 | f64 eps | u32 n | (name, f64 lr, m tensor, v tensor) * n
    rng:    u32 length | JSON of the numpy bit-generator state
    meta:   u32 length | JSON (iteration, mode, config, history, ...)

A tensor is ``u32 name_len | name (UTF-8) | u32 ndim | u64 dims | f64 data``.
"""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .losses import AdamState

MAGIC = b"CAGS"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    adam: AdamState
    rng_state: dict
    meta: dict


def _write_name(fh, name: str) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _write_tensor(fh, name: str, arr) -> None:
    arr = np.asarray(arr, dtype="<f8", order="C")
    _write_name(fh, name)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.name()
        (ndim,) = self.unpack("<I")
        shape = self.unpack(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)
        return name, data.reshape(shape)

    def blob(self) -> dict:
        (n,) = self.unpack("<I")
        return json.loads(self.take(n).decode("utf-8"))


def encode(ckpt: Checkpoint) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        _write_tensor(fh, name, arr)
    a = ckpt.adam
    fh.write(struct.pack("<Qddd", a.step, a.beta1, a.beta2, a.eps))
    fh.write(struct.pack("<I", len(a.lr)))
    for name, lr in a.lr.items():
        _write_name(fh, name)
        fh.write(struct.pack("<d", lr))
        _write_tensor(fh, "m", a.m[name])
        _write_tensor(fh, "v", a.v[name])
    for blob in (ckpt.rng_state, ckpt.meta):
        raw = json.dumps(blob, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
    return fh.getvalue()


def decode(raw: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads version {VERSION}")
    (n,) = r.unpack("<I")
    tensors = dict(r.tensor() for _ in range(n))
    step, b1, b2, eps = r.unpack("<Qddd")
    (n_adam,) = r.unpack("<I")
    lr, m, v = {}, {}, {}
    for _ in range(n_adam):
        name = r.name()
        (lr[name],) = r.unpack("<d")
        m[name] = r.tensor()[1]
        v[name] = r.tensor()[1]
    adam = AdamState(lr, b1, b2, eps, step, m, v)
    rng_state = r.blob()
    meta = r.blob()
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(tensors, adam, rng_state, meta)


def save(path, ckpt: Checkpoint) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    data = encode(ckpt)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(raw, path)
