"""Binary named-tensor weights files (DBFW format).

Layout, all integers little-endian unsigned 32-bit:

    magic "DBFW" | version (1) | entry count
    per entry: name length | UTF-8 name | rank | dims... | float32 payload

Payload floats are little-endian. Entry order is preserved, so writing
the same mapping twice yields byte-identical files.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DBFW"
VERSION = 1


class WeightsFormatError(ValueError):
    """Raised for corrupt or unsupported weights files."""


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays to a DBFW file."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    """Read a DBFW file back into an ordered name -> float32 array mapping."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise WeightsFormatError(f"{path}: bad magic bytes {blob[:4]!r}")
    pos = 4

    def take(fmt: str) -> tuple:
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise WeightsFormatError(f"{path}: truncated file")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise WeightsFormatError(f"{path}: unsupported version {version}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n_elem = int(np.prod(dims)) if dims else 1
        end = pos + 4 * n_elem
        if end > len(blob):
            raise WeightsFormatError(f"{path}: truncated payload for '{name}'")
        arr = np.frombuffer(blob[pos:end], dtype="<f4").reshape(dims)
        arrays[name] = arr.astype(np.float32)
        pos = end
    if pos != len(blob):
        raise WeightsFormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return arrays
