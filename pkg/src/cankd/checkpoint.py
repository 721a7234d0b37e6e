"""Binary checkpoint format.

Little-endian layout::

    magic      8 bytes  b"CANKD\\0\\0\\x01"
    count      u32
    per tensor:
      name_len u16, name (UTF-8), rank u8, extents u32 * rank, values f64 * prod(extents)
    crc        u64      CRC-64/XZ of every preceding byte
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointIOError, CheckpointMissing, FormatError, VersionMismatch

MAGIC = b"CANKD\x00\x00\x01"
_MAGIC_PREFIX = b"CANKD"

_CRC64_POLY = 0xC96C5795D7870F42  # ECMA-182, reflected


def _crc64_table() -> list[int]:
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_TABLE = _crc64_table()


def crc64(data: bytes) -> int:
    crc = 0xFFFFFFFFFFFFFFFF
    for b in data:
        crc = _TABLE[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.require(np.asarray(arr, dtype="<f8"), requirements="C")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", crc64(body))


def decode(buf: bytes) -> dict[str, np.ndarray]:
    """Parse a checkpoint; nothing is returned unless the whole file checks out."""
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        if buf[: len(_MAGIC_PREFIX)] == _MAGIC_PREFIX and len(buf) >= len(MAGIC):
            raise VersionMismatch(f"unsupported checkpoint version bytes {buf[5:8]!r}")
        if len(buf) < len(MAGIC) and MAGIC.startswith(buf):
            raise FormatError("file shorter than the magic header", len(buf))
        raise VersionMismatch("not a CANKD checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf) - 8:
            raise FormatError(f"truncated while reading {what}", pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    if len(buf) < pos + 4 + 8:
        raise FormatError("truncated header", pos)
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        start = pos
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not UTF-8", start) from exc
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(take(8 * n, f"values of {name!r}"), dtype="<f8")
        if name in out:
            raise FormatError(f"duplicate tensor {name!r}", start)
        out[name] = values.reshape(shape).astype(np.float64)
    if pos != len(buf) - 8:
        raise FormatError("unexpected bytes before CRC trailer", pos)
    (stored,) = struct.unpack("<Q", buf[pos:])
    if stored != crc64(buf[:pos]):
        raise FormatError("CRC mismatch", pos)
    return out


def save_checkpoint(tensors: Mapping[str, np.ndarray], path: str | os.PathLike) -> None:
    data = encode(tensors)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointMissing(f"no checkpoint at {path}")
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointIOError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(buf)
