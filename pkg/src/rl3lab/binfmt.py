"""Versioned binary container shared by checkpoints and evaluation task sets.

Layout (little-endian)::

    magic (8 bytes) | format version (u32) | header length (u32) | header JSON
    then per array: name length (u16) | name | dtype length (u8) | dtype str
                    | ndim (u8) | shape (u64 * ndim) | raw bytes
    trailer: SHA-256 of everything before it (32 bytes)
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def write_container(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    buf = io.BytesIO()
    buf.write(magic)
    hdr = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<II", FORMAT_VERSION, len(hdr)))
    buf.write(hdr)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        nb = name.encode()
        dt = arr.dtype.str.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", len(dt)))
        buf.write(dt)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 8 + 8 + 32:
        raise FormatError(f"{path}: file too short")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{path}: checksum mismatch")
    if body[:8] != magic:
        raise FormatError(f"{path}: bad magic {body[:8]!r}, expected {magic!r}")
    version, hlen = struct.unpack_from("<II", body, 8)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    pos = 16
    header = json.loads(body[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode()
        pos += nlen
        (dlen,) = struct.unpack_from("<B", body, pos)
        pos += 1
        dtype = np.dtype(body[pos:pos + dlen].decode())
        pos += dlen
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(body[pos:pos + nbytes], dtype=dtype).reshape(shape).copy()
        pos += nbytes
    return header, arrays
