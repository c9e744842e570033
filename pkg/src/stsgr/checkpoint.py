"""Binary parameter checkpoints.

Layout: the 6-byte magic ``STSGR1`` followed by one record per parameter::

    u64 name_length | name (UTF-8) | u64 rank | u64 dims[rank] | f64 values[prod(dims)]

All integers and floats are little-endian; values are row-major.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"STSGR1"


class CheckpointError(ValueError):
    pass


def dumps(params: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC]
    for name, value in params.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not an STSGR1 checkpoint")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(blob):
                raise CheckpointError(f"truncated values for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(dims)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint at byte {pos}") from exc
    return out


def save(path: str | Path, params: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(params))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
