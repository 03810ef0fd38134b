"""Binary tensor (MPT1) and PGM mask file formats.

MPT1 layout, little-endian throughout::

    b"MPT1" | u32 rank | u32 dims[rank] | f64 values (row-major)
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"MPT1"


def dumps_tensor(array) -> bytes:
    arr = np.asarray(array, dtype="<f8")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def loads_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError("not an MPT1 tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated MPT1 header")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) != off + 8 * count:
        raise FormatError(f"MPT1 payload size mismatch: expected {count} values")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=off)
    return data.reshape(dims).astype(np.float64)


def save_tensor(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_tensor(array))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads_tensor(fh.read())


def save_pgm(path: str | os.PathLike, mask) -> None:
    """Write a binary mask as P5 PGM with values 0/255."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise FormatError("mask must be 2-D")
    h, w = m.shape
    body = np.where(m > 0, 255, 0).astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii") + body)


def _pgm_tokens(buf: bytes, count: int):
    tokens, i = [], 2
    while len(tokens) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError("truncated PGM header")
        tokens.append(int(buf[i:j]))
        i = j
    # exactly one whitespace byte separates header from raster
    return tokens, i + 1


def load_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a P5 PGM; returns a uint8 0/1 mask."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P5":
        raise FormatError("not a binary PGM (P5)")
    (w, h, maxval), off = _pgm_tokens(buf, 3)
    if maxval > 255:
        raise FormatError("16-bit PGM not supported")
    raster = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=off)
    return (raster.reshape(h, w) > 0).astype(np.uint8)
