"""``.ten`` binary tensor files.

Layout: magic ``IFT1``, u8 dtype code, u8 rank, rank x u64 little-endian
dims, then the row-major little-endian payload.
"""

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"IFT1"
# codes 0/1 are the float formats; 2 carries integer index maps
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


def encode(arr) -> bytes:
    if isinstance(arr, Tensor):
        arr = arr.data
    arr = np.asarray(arr)
    if arr.dtype.kind in "iu":
        arr = arr.astype(np.int64)
    code = _CODE_OF.get(arr.dtype)
    if code is None:
        raise TypeError(f"cannot store dtype {arr.dtype} in a .ten file")
    if arr.ndim > 255:
        raise ValueError("rank exceeds 255")
    head = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ValueError("not a .ten file (bad magic)")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in DTYPE_CODES:
        raise ValueError(f"unknown .ten dtype code {code}")
    dims = struct.unpack_from(f"<{rank}Q", buf, 6)
    start = 6 + 8 * rank
    dt = DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - start != count * dt.itemsize:
        raise ValueError("truncated or oversized .ten payload")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=start).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True)


def save(path, arr) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())
