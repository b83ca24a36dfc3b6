"""Little-endian binary helpers shared by the model and randomness files."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

_DTYPES = {0: np.dtype("<u8"), 1: np.dtype("u1"), 2: np.dtype("<i8"), 3: np.dtype("<f8")}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    pass


def write_u8(fh: BinaryIO, v: int):
    fh.write(struct.pack("<B", v))


def write_u16(fh: BinaryIO, v: int):
    fh.write(struct.pack("<H", v))


def write_u32(fh: BinaryIO, v: int):
    fh.write(struct.pack("<I", v))


def _read(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def read_u8(fh: BinaryIO) -> int:
    return struct.unpack("<B", _read(fh, 1))[0]


def read_u16(fh: BinaryIO) -> int:
    return struct.unpack("<H", _read(fh, 2))[0]


def read_u32(fh: BinaryIO) -> int:
    return struct.unpack("<I", _read(fh, 4))[0]


def write_str(fh: BinaryIO, s: str):
    data = s.encode()
    write_u16(fh, len(data))
    fh.write(data)


def read_str(fh: BinaryIO) -> str:
    return _read(fh, read_u16(fh)).decode()


def write_magic(fh: BinaryIO, magic: bytes, version: int):
    fh.write(magic)
    write_u16(fh, version)


def read_magic(fh: BinaryIO, magic: bytes, version: int):
    got = fh.read(len(magic))
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    v = read_u16(fh)
    if v != version:
        raise FormatError(f"unsupported version {v}, expected {version}")


def write_array(fh: BinaryIO, arr: np.ndarray):
    """dtype code u8, ndim u8, dims u32..., raw little-endian data."""
    arr = np.asarray(arr)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    code = _CODES.get(le.dtype.str)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    write_u8(fh, code)
    write_u8(fh, arr.ndim)
    for d in arr.shape:
        write_u32(fh, d)
    fh.write(np.ascontiguousarray(le).tobytes())


def read_array(fh: BinaryIO) -> np.ndarray:
    code = read_u8(fh)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dtype = _DTYPES[code]
    shape = tuple(read_u32(fh) for _ in range(read_u8(fh)))
    count = int(np.prod(shape, dtype=np.int64))
    data = _read(fh, count * dtype.itemsize)
    out = np.frombuffer(data, dtype=dtype).reshape(shape)
    return out.astype(dtype.newbyteorder("="))


def write_ring_array(fh: BinaryIO, arr: np.ndarray, nbytes: int):
    """ndim u8, dims u32..., then elements as ``nbytes``-wide little-endian ints."""
    arr = np.asarray(arr, dtype=np.uint64)
    write_u8(fh, arr.ndim)
    for d in arr.shape:
        write_u32(fh, d)
    raw = arr.astype("<u8").reshape(-1).view(np.uint8).reshape(-1, 8)[:, :nbytes]
    fh.write(raw.tobytes())


def read_ring_array(fh: BinaryIO, nbytes: int) -> np.ndarray:
    shape = tuple(read_u32(fh) for _ in range(read_u8(fh)))
    count = int(np.prod(shape, dtype=np.int64))
    raw = np.frombuffer(_read(fh, count * nbytes), dtype=np.uint8).reshape(count, nbytes)
    padded = np.zeros((count, 8), dtype=np.uint8)
    padded[:, :nbytes] = raw
    return padded.view("<u8").reshape(shape).astype(np.uint64)
