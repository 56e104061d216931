"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic    4 bytes   b"MNCK"
    version  uint32    1
    count    uint32    number of records
    record * count:
        name_len  uint32
        name      name_len bytes, UTF-8
        ndim      uint32
        dims      ndim * uint64
        data      prod(dims) * float64, little-endian, row-major

Records keep the order in which they were written.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from ..exceptions import InvalidShapeError

MAGIC = b"MNCK"
VERSION = 1


def dumps(records) -> bytes:
    """Serialize an iterable of ``(name, array)`` pairs."""
    records = [(name, np.asarray(arr, dtype=np.float64)) for name, arr in records]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(records)))
    for name, arr in records:
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> list[tuple[str, np.ndarray]]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise InvalidShapeError("not a parameter checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise InvalidShapeError(f"unsupported checkpoint version {version}")
    offset = 12
    out = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", view, offset)
        offset += 4
        name = bytes(view[offset:offset + name_len]).decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", view, offset)
        offset += 4
        dims = struct.unpack_from(f"<{ndim}Q", view, offset)
        offset += 8 * ndim
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(view, dtype="<f8", count=n, offset=offset).astype(np.float64)
        offset += 8 * n
        out.append((name, data.reshape(dims)))
    if offset != len(blob):
        raise InvalidShapeError("trailing bytes after last checkpoint record")
    return out


def save(path, records) -> None:
    Path(path).write_bytes(dumps(records))


def load(path) -> list[tuple[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
