"""Binary parameter checkpoints.

Layout (little endian)::

    b"SSAE" | version u32 | count u32 |
    count x ( name_len u32 | name utf-8 | rank u32 | extents u32 * rank | values f64 * prod(extents) )
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"SSAE"
VERSION = 1


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise DataError("not an SSAE checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        pos = 12
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * n > len(blob):
                raise DataError(f"checkpoint truncated inside tensor {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * n
    except struct.error as exc:
        raise DataError(f"checkpoint truncated: {exc}") from None
    if pos != len(blob):
        raise DataError(f"{len(blob) - pos} trailing bytes after checkpoint")
    return out


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
