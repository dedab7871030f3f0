"""DRPK binary checkpoint format.

Little-endian throughout: 4-byte magic "DRPK", u32 version, then one record
per array: u32 name length, UTF-8 name, u8 dtype code (1=float64,
2=float32, 3=int64), u8 rank, u32 extents, row-major payload. Records keep
insertion order, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = ["MAGIC", "VERSION", "CheckpointError", "save_arrays", "load_arrays"]

MAGIC = b"DRPK"
VERSION = 1

_CODES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("<i8")}
_RCODES = {np.dtype(np.float64): 1, np.dtype(np.float32): 2, np.dtype(np.int64): 3}


class CheckpointError(ValueError):
    """Malformed or unsupported checkpoint file."""


def save_arrays(path, arrays: dict) -> None:
    """Write named arrays in dict order."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            code = _RCODES.get(np.dtype(arr.dtype).newbyteorder("="))
            if code is None:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            enc = name.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())


def load_arrays(path) -> dict:
    """Read records back into an ordered name -> array dict."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 8
    out: dict = {}
    while pos < len(raw):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, rank = struct.unpack_from("<BB", raw, pos)
        pos += 2
        if code not in _CODES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        dtype = _CODES[code]
        count = int(np.prod(shape)) if rank else 1
        need = count * dtype.itemsize
        if len(raw) - pos < need:
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).reshape(shape)
        out[name] = arr.astype(dtype.newbyteorder("="))
        pos += need
    return out
