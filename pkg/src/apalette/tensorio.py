"""Versioned binary tensor archive.

Layout: magic 'APTN', u32 version, u32 count, then per tensor a manifest
record (u16 name length, utf-8 name, u8 dtype code, u8 ndim, u32 dims...)
followed immediately by the little-endian payload. Byte output depends only
on the tensors, so identical runs produce identical files.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"APTN"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_tensors(tensors: dict, path) -> None:
    """Write {name: float array} to path; names are sorted for stable bytes."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype not in _CODES:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_tensors(path) -> dict:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    out = {}
    pos = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dtype = _DTYPES[code]
        n_elems = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(data, dtype=dtype, count=n_elems, offset=pos).reshape(shape)
        out[name] = arr.copy()
        pos += n_elems * dtype.itemsize
    return out
