"""Binary checkpoint format.

Layout: magic "PFACKPT1", then for each array in order: name length (u32
little-endian), UTF-8 name, rank (u32), extents (u32 each), values (fp64
little-endian, row-major).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"PFACKPT1"


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: unknown magic {raw[:8]!r}")
    arrays: dict[str, np.ndarray] = {}
    pos = 8
    total = len(raw)
    while pos < total:
        if pos + 4 > total:
            raise CheckpointError(f"{path}: truncated record header")
        (name_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        nbytes = 8 * count
        if pos + nbytes > total:
            raise CheckpointError(f"{path}: truncated values for {name!r}")
        values = np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
        pos += nbytes
        if name in arrays:
            raise CheckpointError(f"{path}: duplicate array name {name!r}")
        arrays[name] = values.reshape(shape).astype(np.float64)
    return arrays
