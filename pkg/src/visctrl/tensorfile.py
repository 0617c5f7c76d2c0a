"""Reader/writer for the "VTSR" tensor container.

Layout (all little-endian)::

    b"VTSR"  u16 version (=1)  u16 count
    per tensor:  u16 name_len, name (utf-8), u8 dtype (1 = f32), u8 rank,
                 u32 dims[rank], f32 payload (C order)

Weights and every raw tensor dump use this format.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError, IOFailure

MAGIC = b"VTSR"
VERSION = 1
DTYPE_F32 = 1


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    if len(tensors) > 0xFFFF:
        raise FormatError("too many tensors for a u16 count")
    parts = [MAGIC, struct.pack("<HH", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4", order="C")
        if len(raw) > 0xFFFF or a.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} cannot be represented")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", DTYPE_F32, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated file while reading {what} at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    magic = bytes(take(4, "magic"))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<HH", take(4, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid utf-8") from exc
        dtype, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if dtype != DTYPE_F32:
            raise FormatError(f"tensor {name!r}: unsupported dtype code {dtype}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims, dtype=np.int64))
        payload = take(4 * n, f"payload of {name!r}")
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last tensor")
    return out


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def save(path, tensors: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(tensors))


def load(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    return decode(buf)
