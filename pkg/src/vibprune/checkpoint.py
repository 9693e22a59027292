"""Named-tensor binary checkpoint: magic "VIBP", little-endian throughout.

Layout: magic (4 bytes) | version u32 | tensor count u32 | per tensor:
name length u16, UTF-8 name, ndim u8, dims u32 each, raw float32 payload.
Round trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"VIBP"
VERSION = 1


def save_tensors(tensors: dict, path: str) -> None:
    names = sorted(tensors)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(names)))
        for name in names:
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def load_tensors(path: str) -> dict:
    out = {}
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic")
        version, count = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            n = int(np.prod(dims, dtype=np.int64)) if dims else 1
            payload = f.read(4 * n)
            if len(payload) != 4 * n:
                raise FormatError(f"{path}: truncated payload for '{name}'")
            if name in out:
                raise FormatError(f"{path}: duplicate tensor name '{name}'")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return out
