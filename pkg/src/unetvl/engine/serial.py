"""Binary tensor file format and the named-tensor checkpoint container.

Single tensor record ("UVL1"):
    magic   4 bytes  b"UVL1"
    dtype   u8       0 = f32, 1 = f64
    rank    u8
    extents rank x u32, little-endian
    data    raw little-endian values, row-major

Container ("UVLC"): header magic b"UVLC" + u32 entry count, then per entry a
u16 name length, the UTF-8 name, and a full UVL1 record. Used for model
checkpoints (name -> tensor) and optimizer state.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC_TENSOR = b"UVL1"
MAGIC_CONTAINER = b"UVLC"

_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(Exception):
    """Raised on malformed UVL1/UVLC input."""


def write_tensor(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODE:
        raise FormatError(f"UVL1 stores f32/f64 only, got {arr.dtype}")
    fh.write(MAGIC_TENSOR)
    fh.write(struct.pack("<BB", _DTYPE_CODE[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC_TENSOR:
        raise FormatError(f"bad tensor magic {magic!r}")
    code, rank = struct.unpack("<BB", _read_exact(fh, 2))
    if code not in _CODE_DTYPE:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    dtype = _CODE_DTYPE[code]
    count = 1
    for n in shape:
        count *= n
    raw = _read_exact(fh, count * dtype.itemsize)
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("=")))


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError("truncated file")
    return raw


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_container(path, entries: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC_CONTAINER)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            blob = name.encode("utf-8")
            fh.write(struct.pack("<H", len(blob)))
            fh.write(blob)
            write_tensor(fh, arr)


def load_container(path) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC_CONTAINER:
            raise FormatError(f"bad container magic {magic!r}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, nlen).decode("utf-8")
            entries[name] = read_tensor(fh)
    return entries
