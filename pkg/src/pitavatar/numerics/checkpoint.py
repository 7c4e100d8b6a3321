"""Binary tensor checkpoint.

Layout: ASCII magic ``PFLHM1``, then one record per array until EOF::

    u32 name_len | name (utf-8) | u32 rank | u64 dim * rank | f64 payload

All integers and floats are little-endian; payload is row-major.
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PFLHM1"


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays):
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, a in arrays.items():
            a = np.array(a, dtype="<f8", order="C")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            f.write(a.tobytes())


def load_arrays(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = len(MAGIC)
    out = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos: pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt record ({e})") from e
    return out
