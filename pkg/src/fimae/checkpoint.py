"""Flat named-tensor weight archives.

Layout, all integers little-endian 64-bit unless noted:

    entry*   := name_len:u64  name:utf8  rank:u64  extents:u64*rank  data:f32*prod
    trailer  := entry_count:u64

Values are stored as raw 32-bit little-endian floats; round-trips are
bit-exact for float32 sources.  Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np


class CheckpointError(IOError):
    """Malformed or truncated checkpoint archive."""


def save_checkpoint(path: str, named: dict[str, np.ndarray]) -> None:
    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            for name, arr in named.items():
                raw = name.encode("utf-8")
                a = np.ascontiguousarray(arr, dtype="<f4")
                fh.write(struct.pack("<Q", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<Q", a.ndim))
                fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
                fh.write(a.tobytes())
            fh.write(struct.pack("<Q", len(named)))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise CheckpointError(f"{path}: too short for the entry-count trailer")
    (count,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    named: dict[str, np.ndarray] = {}
    off = 0
    limit = len(blob) - 8
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<Q", blob, off)
            off += 8
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<Q", blob, off)
            off += 8
            shape = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path}: truncated entry at byte {off}") from exc
        named[name] = arr.copy()
    if off != limit:
        raise CheckpointError(f"{path}: {limit - off} unparsed bytes before trailer")
    return named
