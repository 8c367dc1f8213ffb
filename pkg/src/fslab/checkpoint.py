"""FSLT tensor container.

Layout (little-endian): ``b"FSLT"``, u32 version (1), u32 tensor count, then
per tensor: u32 name length, UTF-8 name, u32 rank, rank x u64 dims, f64 payload
in row-major order.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from fslab.errors import FormatError, VersionError

MAGIC = b"FSLT"
VERSION = 1


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode_tensors(blob: bytes, offset: int = 0) -> tuple[dict[str, np.ndarray], int]:
    """Parse a tensor block starting at ``offset``; return (tensors, end offset)."""
    def take(n):
        nonlocal offset
        if offset + n > len(blob):
            raise FormatError("unexpected end of FSLT data")
        chunk = blob[offset:offset + n]
        offset += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError("bad magic: not an FSLT file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise VersionError(f"unsupported FSLT version {version} (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        out[name] = arr
    return out, offset


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    tensors, end = decode_tensors(blob)
    if end != len(blob):
        raise FormatError(f"{len(blob) - end} trailing bytes after tensor block")
    return tensors
