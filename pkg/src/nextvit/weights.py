"""Binary weight container.

Layout (all integers little-endian)::

    magic        4 bytes   b"NVTW"
    version      u8        1
    entry_count  u32
    entries, each:
        name_len u16, name (UTF-8), dtype u8 (0 = float32 LE),
        ndim u8, dims ndim × u32, raw row-major data
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .errors import BadMagic, DtypeUnsupported, DuplicateName, TruncatedFile, WeightFileError
from .params import ParamSet

MAGIC = b"NVTW"
VERSION = 1
DTYPE_F32 = 0


def to_bytes(params: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(params))]
    for name, value in params.items():
        a = np.asarray(value)
        if a.dtype != np.float32:
            raise DtypeUnsupported(f"{name}: only float32 can be stored, got {a.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or a.ndim > 0xFF:
            raise ValueError(f"{name}: name or rank too large for the container")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_F32, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"file ends inside {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf: bytes) -> ParamSet:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise BadMagic("not a weight file (bad magic)")
    version, count = r.unpack("<BI", "header")
    if version != VERSION:
        raise BadMagic(f"unsupported weight file version {version}")
    out: ParamSet = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"entry {i} name length")
        name = r.take(name_len, f"entry {i} name").decode("utf-8")
        dtype, ndim = r.unpack("<BB", f"entry {name} header")
        if dtype != DTYPE_F32:
            raise DtypeUnsupported(f"{name}: dtype code {dtype} is not supported")
        dims = r.unpack(f"<{ndim}I", f"entry {name} dims")
        nbytes = int(np.prod(dims, dtype=np.int64)) * 4
        raw = r.take(nbytes, f"entry {name} data")
        if name in out:
            raise DuplicateName(f"duplicate entry {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(buf):
        raise WeightFileError(f"{len(buf) - r.pos} trailing bytes after the last entry")
    return out


def save_weights(params: Mapping[str, np.ndarray], path) -> None:
    data = to_bytes(params)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_weights(path) -> ParamSet:
    with open(path, "rb") as f:
        return from_bytes(f.read())


def save_tensor(x, path, name: str = "input") -> None:
    """Store a single activation tensor using the weight container."""
    save_weights({name: np.asarray(x, dtype=np.float32)}, path)


def load_tensor(path, name: str = "input") -> np.ndarray:
    entries = load_weights(path)
    if name not in entries:
        raise KeyError(f"{path} has no entry named {name!r}")
    return entries[name]
