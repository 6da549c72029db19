"""Binary container for model parameters and training checkpoints.

Layout (all integers unsigned 32-bit little-endian):

    "ACAE" | version | dim | heads | ffn_dim
    repeated blocks until EOF:
        name_len | name (UTF-8) | rows | cols | rows*cols float32 LE, row-major

Blocks are written in sorted name order so files are byte-reproducible.
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ACAE"

_U32 = struct.Struct("<I")


class FileFormatError(ValueError):
    """The file is not a valid parameter container."""


def write_blocks(path, version: int, dims: tuple, blocks: dict) -> None:
    d, heads, ffn = dims
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for value in (version, d, heads, ffn):
            fh.write(_U32.pack(value))
        for name in sorted(blocks):
            arr = np.ascontiguousarray(blocks[name], dtype=np.float32)
            if arr.ndim != 2:
                raise ValueError(f"block {name!r} must be 2-d, got shape {arr.shape}")
            encoded = name.encode("utf-8")
            fh.write(_U32.pack(len(encoded)))
            fh.write(encoded)
            fh.write(_U32.pack(arr.shape[0]))
            fh.write(_U32.pack(arr.shape[1]))
            fh.write(arr.astype("<f4").tobytes())


def read_blocks(path):
    """Returns (version, (dim, heads, ffn_dim), {name: float64 array})."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise FileFormatError("bad magic: not a parameter file")
    pos = 4
    header = []
    for _ in range(4):
        if pos + 4 > len(data):
            raise FileFormatError("truncated header")
        header.append(_U32.unpack_from(data, pos)[0])
        pos += 4
    version, d, heads, ffn = header

    blocks = {}
    while pos < len(data):
        if pos + 4 > len(data):
            raise FileFormatError("truncated block name length")
        (name_len,) = _U32.unpack_from(data, pos)
        pos += 4
        if pos + name_len + 8 > len(data):
            raise FileFormatError("truncated block header")
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rows,) = _U32.unpack_from(data, pos)
        (cols,) = _U32.unpack_from(data, pos + 4)
        pos += 8
        nbytes = rows * cols * 4
        if pos + nbytes > len(data):
            raise FileFormatError(f"truncated data for block {name!r}")
        flat = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=pos)
        pos += nbytes
        if name in blocks:
            raise FileFormatError(f"duplicate block {name!r}")
        blocks[name] = flat.reshape(rows, cols).astype(np.float64)
    return version, (d, heads, ffn), blocks
