"""Binary parameter checkpoints.

Layout (little-endian): magic ``PTSG``, u32 version, u32 tensor count, then per
tensor a u16 name length, the UTF-8 name, u8 rank, ``rank`` u32 extents and
the payload as 32-bit floats.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PTSG"
VERSION = 1


def encode_checkpoint(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr))
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def read(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint reading {what}: need {n} bytes, {len(buf) - pos} left", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if read(4, "magic") != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, count = struct.unpack("<II", read(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", read(2, "name length"))
        name = read(n, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", read(1, "rank"))
        shape = struct.unpack(f"<{rank}I", read(4 * rank, "extents"))
        size = int(np.prod(shape, dtype=np.int64))
        payload = read(4 * size, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor", pos)
    return out


def save_checkpoint(path, tensors: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
