"""Versioned little-endian binary container for named numpy arrays.

Layout: magic (4 bytes), format version (u32), metadata string pairs, then
named sections each carrying a dtype tag, the shape and the raw values in C
order.  Writes are atomic (temp file + rename); reads are bounds-checked so
truncation is reported explicitly.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import CheckpointError


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated file "
                                  f"(needed {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def write_arrays(path, magic: bytes, version: int, meta: dict[str, str],
                 arrays: dict[str, np.ndarray]):
    """Atomically write named arrays with metadata."""
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    chunks = [magic, struct.pack("<I", version), struct.pack("<I", len(meta))]
    for key, value in meta.items():
        chunks.append(_pack_str(key))
        chunks.append(_pack_str(str(value)))
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        chunks.append(_pack_str(name))
        chunks.append(_pack_str(dtype.str))
        chunks.append(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            chunks.append(struct.pack("<Q", dim))
        chunks.append(arr.astype(dtype, copy=False).tobytes(order="C"))

    out_dir = os.path.dirname(os.path.abspath(path))
    os.makedirs(out_dir, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_arrays(path, magic: bytes, version: int | None = None):
    """Read a container; returns (version, meta, arrays).

    Raises :class:`CheckpointError` on a wrong magic, an unsupported version,
    truncation, or trailing garbage.
    """
    try:
        with open(path, "rb") as fh:
            reader = _Reader(fh.read(), path)
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    got_magic = reader.take(4)
    if got_magic != magic:
        raise CheckpointError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    got_version = reader.u32()
    if version is not None and got_version != version:
        raise CheckpointError(f"{path}: format version {got_version} not supported "
                              f"(expected {version})")
    meta = {}
    for _ in range(reader.u32()):
        key = reader.string()
        meta[key] = reader.string()
    arrays = {}
    for _ in range(reader.u32()):
        name = reader.string()
        dtype = np.dtype(reader.string())
        ndim = reader.u32()
        shape = tuple(struct.unpack("<Q", reader.take(8))[0] for _ in range(ndim))
        nbytes = int(dtype.itemsize * int(np.prod(shape, dtype=np.int64)))
        raw = reader.take(nbytes)
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if reader.pos != len(reader.data):
        raise CheckpointError(f"{path}: {len(reader.data) - reader.pos} trailing bytes")
    return got_version, meta, arrays
