"""Binary tensor format.

Layout of one blob: magic ``b"LLT1"``, dtype code (u32), rank (u32), each dim
as u64, then row-major values. Everything little-endian. Checkpoints are
concatenated blobs whose names live in a JSON manifest.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

MAGIC = b"LLT1"
DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("<u2"): 4,
    np.dtype("<i4"): 5,
    np.dtype("u1"): 6,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class FormatError(ValueError):
    pass


def write_array(fh: BinaryIO, arr: np.ndarray):
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    fh.write(MAGIC)
    fh.write(struct.pack("<II", DTYPE_CODES[dt], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_array(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    code, rank = struct.unpack("<II", fh.read(8))
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    dt = CODE_DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    buf = fh.read(n * dt.itemsize)
    if len(buf) != n * dt.itemsize:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(buf, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def dumps(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_array(buf, arr)
    return buf.getvalue()


def loads(data: bytes) -> np.ndarray:
    return read_array(io.BytesIO(data))


def save_arrays(path: str | Path, arrays: Iterable[np.ndarray]):
    with open(path, "wb") as fh:
        for arr in arrays:
            write_array(fh, arr)


def load_arrays(path: str | Path, count: int | None = None) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while count is None or len(out) < count:
            head = fh.peek(4)[:4] if hasattr(fh, "peek") else b""
            if not head:
                break
            out.append(read_array(fh))
    return out
