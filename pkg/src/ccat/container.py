"""Little-endian tensor container shared by checkpoints and feature caches.

Layout::

    b"CCAT" | u32 version | u32 config_len | config JSON (UTF-8)
    u32 tensor_count
    per tensor: u16 name_len | name | u8 dtype | u8 ndim | u32 dims[ndim] | raw values

dtype codes: 0 = float32, 1 = uint8.  No alignment padding anywhere.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint, FormatError

MAGIC = b"CCAT"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("<f4"): 0, np.dtype("u1"): 1}


def encode(config: dict, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr)
        if arr.dtype == np.bool_ or arr.dtype == np.uint8:
            arr = arr.astype("u1")
        else:
            arr = arr.astype("<f4")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpoint(f"unexpected end of data at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic: not a CCAT container")
    r = _Reader(buf)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    (cfg_len,) = r.unpack("<I")
    try:
        config = json.loads(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"config block unreadable: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8", errors="strict")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CorruptCheckpoint(f"tensor {name!r}: unknown dtype code {code}")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(dims)
        if name in tensors:
            raise CorruptCheckpoint(f"duplicate tensor name {name!r}")
        tensors[name] = arr.copy()
    if r.pos != len(buf):
        raise CorruptCheckpoint(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return config, tensors


def write(path: str | Path, config: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    Path(path).write_bytes(encode(config, tensors))


def read(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
