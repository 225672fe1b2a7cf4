"""Sectioned binary container for checkpoints and per-utterance feature files.

Layout (all integers little-endian)::

    magic      8 bytes  b"MTWNCONT"
    version    u32      currently 1
    header     u32 length + UTF-8 JSON object (config, run id, metadata)
    n_records  u32
    record*    u16 name length, UTF-8 name,
               u8 ndim, ndim x u64 dims,
               prod(dims) x f64 payload

Readers reject any other magic or version.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MTWNCONT"
VERSION = 1


class ContainerFormatError(ValueError):
    pass


def write_container(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ContainerFormatError(f"{path}: bad magic {raw[:8]!r}")
    try:
        (version,) = struct.unpack_from("<I", raw, 8)
        if version != VERSION:
            raise ContainerFormatError(f"{path}: unsupported container version {version}")
        pos = 12
        (hlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * n > len(raw):
                raise ContainerFormatError(f"{path}: record {name!r} is truncated")
            arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise ContainerFormatError(f"{path}: truncated container ({exc})") from exc
    return header, arrays
