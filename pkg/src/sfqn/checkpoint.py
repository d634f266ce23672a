"""Binary checkpoint records.

File layout: magic b"SFQN", u16 version (=1), then a sequence of records
  [u16 name length][name bytes (utf-8)][u8 rank][u32 dims ...]
  [little-endian IEEE-754 32-bit values, row-major]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SFQN"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_records(path, records: dict[str, np.ndarray]) -> None:
    """Write named arrays (rank <= 4) to `path` in insertion order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        for name, arr in records.items():
            arr = np.asarray(arr, dtype=np.float32)
            if arr.ndim > 4:
                raise CheckpointFormatError(f"record {name!r} has rank {arr.ndim}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes(order="C"))


def load_records(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointFormatError("bad magic; not a checkpoint file")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    off = 6
    records: dict[str, np.ndarray] = {}
    while off < len(data):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(data, dtype="<f4", count=count, offset=off)
        off += 4 * count
        records[name] = values.reshape(shape).astype(np.float64)
    return records
