"""Portable binary checkpoints.

Byte layout (all integers little-endian)::

    magic        8 bytes   b"AATCKPT\\x00"
    version      u32       currently 1
    meta_len     u32
    meta         meta_len bytes of UTF-8 JSON (experiment id, iteration, ...)
    n_entries    u32
    n_entries times:
        kind     u8        0 = parameter, 1 = optimizer momentum buffer
        name_len u16
        name     name_len bytes UTF-8
        dtype    u8        0 = float32, 1 = float64
        ndim     u8
        dims     ndim x u32
        nbytes   u64
        payload  nbytes of little-endian floats, C order
        crc32    u32 of payload
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"AATCKPT\x00"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointFormatError(ValueError):
    """The file is not a valid checkpoint; the message names the bad entry."""


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def _entry(kind: int, name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
    payload = arr.astype(_DTYPES[code], copy=False).tobytes()
    raw_name = name.encode("utf-8")
    head = struct.pack("<BH", kind, len(raw_name)) + raw_name
    head += struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + struct.pack("<Q", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(
    path: str | Path,
    params: Mapping[str, np.ndarray],
    momentum: Mapping[str, np.ndarray] | None = None,
    metadata: Mapping | None = None,
) -> None:
    momentum = momentum or {}
    meta = json.dumps(dict(metadata or {}), sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta)), meta]
    chunks.append(struct.pack("<I", len(params) + len(momentum)))
    for name in sorted(params):
        chunks.append(_entry(0, name, params[name]))
    for name in sorted(momentum):
        chunks.append(_entry(1, name, momentum[name]))
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: str | Path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint file")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = r.unpack("<I", "metadata length")
    try:
        metadata = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"metadata block is not valid JSON: {exc}") from None
    (count,) = r.unpack("<I", "entry count")
    ckpt = Checkpoint(metadata=metadata)
    for k in range(count):
        label = f"entry #{k}"
        kind, name_len = r.unpack("<BH", label)
        try:
            name = r.take(name_len, label).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError(f"{label}: name is not UTF-8") from None
        label = f"entry {name!r}"
        code, ndim = r.unpack("<BB", label)
        if code not in _DTYPES or kind not in (0, 1):
            raise CheckpointFormatError(f"{label}: unknown dtype code {code} or kind {kind}")
        dims = r.unpack(f"<{ndim}I", label)
        (nbytes,) = r.unpack("<Q", label)
        dtype = _DTYPES[code]
        if nbytes != int(np.prod(dims, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointFormatError(f"{label}: payload size {nbytes} does not match shape {dims}")
        payload = r.take(nbytes, label)
        (crc,) = r.unpack("<I", label)
        if zlib.crc32(payload) != crc:
            raise CheckpointFormatError(f"{label}: checksum mismatch")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        (ckpt.params if kind == 0 else ckpt.momentum)[name] = arr
    if r.pos != len(r.buf):
        raise CheckpointFormatError(f"{len(r.buf) - r.pos} trailing bytes after last entry")
    return ckpt
