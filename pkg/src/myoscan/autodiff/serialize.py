"""MYOW weight container.

Layout (little-endian): ``b"MYOW"``, u32 format version, then until end of
file a sequence of records ``u32 name_len, name (UTF-8), u32 rank,
rank x u32 dims, prod(dims) x f32``.
"""
from __future__ import annotations

import os
import struct
from typing import Dict

import numpy as np

MAGIC = b"MYOW"
VERSION = 1


class FormatError(ValueError):
    pass


def dumps_weights(tensors: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads_weights(blob: bytes) -> Dict[str, np.ndarray]:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError("not a MYOW weight file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported MYOW version {version}")
    out, pos = {}, 8
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            if pos + n > len(blob):
                raise FormatError("truncated tensor name")
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) * 4
            if pos + size > len(blob):
                raise FormatError(f"truncated data for tensor {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=pos).reshape(dims).astype(np.float32)
            pos += size
    except struct.error as exc:
        raise FormatError(f"truncated MYOW file: {exc}") from None
    return out


def atomic_write(path, data: bytes):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_weights(path, tensors):
    atomic_write(path, dumps_weights(tensors))


def load_weights(path):
    with open(path, "rb") as fh:
        return loads_weights(fh.read())
