"""Versioned binary container for named arrays.

Layout (all integers little-endian)::

    magic     4 bytes  b"EVLC"
    version   u32
    kind_len  u32, kind (utf-8)        -- "params", "dataset", ...
    hdr_len   u32, header (utf-8 JSON)
    count     u32
    count x entry:
        name_len u32, name (utf-8)
        dtype    u8    0 = float64, 1 = float32, 2 = int64
        ndim     u32, ndim x u64 dims
        payload  little-endian, row-major

Writes go to a temporary file in the target directory and are renamed into
place, so readers never observe a half-written container.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"EVLC"
FORMAT_VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("int64"): 2}


class ContainerError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def encode_container(entries: Mapping[str, np.ndarray], header: dict | None = None,
                     kind: str = "params") -> bytes:
    chunks = [MAGIC, _u32(FORMAT_VERSION)]
    kind_b = kind.encode("utf-8")
    chunks += [_u32(len(kind_b)), kind_b]
    hdr = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    chunks += [_u32(len(hdr)), hdr, _u32(len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise ContainerError(f"unsupported dtype {arr.dtype} for {name!r}")
        code = _CODES[arr.dtype]
        name_b = name.encode("utf-8")
        chunks += [_u32(len(name_b)), name_b, struct.pack("<B", code), _u32(arr.ndim)]
        chunks += [struct.pack("<Q", d) for d in arr.shape]
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(chunks)


def decode_container(data: bytes, kind: str | None = None):
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError("truncated container")
        out = view[pos:pos + n]
        pos += n
        return out

    def u32():
        return struct.unpack("<I", take(4))[0]

    if bytes(take(4)) != MAGIC:
        raise ContainerError("not an evoloss container (bad magic)")
    version = u32()
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    found_kind = bytes(take(u32())).decode("utf-8")
    if kind is not None and found_kind != kind:
        raise ContainerError(f"expected a {kind!r} container, found {found_kind!r}")
    header = json.loads(bytes(take(u32())).decode("utf-8"))
    entries = {}
    for _ in range(u32()):
        name = bytes(take(u32())).decode("utf-8")
        code = struct.unpack("<B", take(1))[0]
        if code not in _DTYPES:
            raise ContainerError(f"unknown dtype code {code} for {name!r}")
        ndim = u32()
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(ndim))
        dt = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        raw = take(count * dt.itemsize)
        entries[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(view):
        raise ContainerError("trailing bytes after last entry")
    return header, entries


def write_container(path, entries, header=None, kind="params") -> None:
    atomic_write_bytes(path, encode_container(entries, header, kind))


def read_container(path, kind: str | None = None):
    return decode_container(Path(path).read_bytes(), kind=kind)
