"""Binary checkpoint files.

Layout (all integers unsigned 64-bit little-endian)::

    b"SAEKIT1" | count | count × record
    record = name_len | name (utf-8) | rank | rank × extent | values (float32 LE, row-major)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SAEKIT1"
_U64 = struct.Struct("<Q")


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, _U64.pack(len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts += [_U64.pack(len(raw)), raw, _U64.pack(arr.ndim)]
        parts += [_U64.pack(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated at byte offset {pos} (needed {n} more bytes)")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    def u64() -> int:
        return _U64.unpack(take(8))[0]

    out: dict[str, np.ndarray] = {}
    for _ in range(u64()):
        start = pos
        name = take(u64()).decode("utf-8")
        shape = tuple(u64() for _ in range(u64()))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        values = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32)
        if name in out:
            raise FormatError(f"{path}: duplicate tensor {name!r} at byte offset {start}")
        out[name] = values.reshape(shape)
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes at offset {pos}")
    return out


def save_model(path, m) -> None:
    save_checkpoint(path, m.state_dict())


def load_model(path, m) -> None:
    m.load_state_dict(load_checkpoint(path))
