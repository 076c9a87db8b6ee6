"""CPT1: the package's binary tensor file format.

Layout, all little-endian:

    bytes 0..3   magic ``CPT1``
    byte  4      dtype code: 0 = float32, 1 = float64
    byte  5      number of dimensions (1..255)
    next ndim*8  dimension sizes, uint64
    rest         elements, row-major

Round-trips are bit-exact for finite float32/float64 data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CPT1"

_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensor(path, t) -> None:
    arr = np.ascontiguousarray(t)
    if arr.dtype not in _DTYPE_TO_CODE:
        raise ValueError(f"CPT1 stores float32/float64 tensors, got {arr.dtype}")
    if arr.ndim < 1 or arr.ndim > 255:
        raise ValueError(f"CPT1 stores 1..255 dimensions, got {arr.ndim}")
    if arr.size == 0:
        raise ValueError("CPT1 tensors must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to write non-finite elements")
    code = _DTYPE_TO_CODE[arr.dtype]
    header = MAGIC + bytes([code, arr.ndim])
    header += b"".join(struct.pack("<Q", d) for d in arr.shape)
    payload = arr.astype(_CODE_TO_DTYPE[code], copy=False).tobytes(order="C")
    Path(path).write_bytes(header + payload)


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a CPT1 file")
    code, ndim = raw[4], raw[5]
    if code not in _CODE_TO_DTYPE:
        raise ValueError(f"{path}: unknown dtype code {code}")
    if ndim < 1:
        raise ValueError(f"{path}: invalid ndim {ndim}")
    offset = 6 + 8 * ndim
    if len(raw) < offset:
        raise ValueError(f"{path}: truncated header")
    shape = struct.unpack("<" + "Q" * ndim, raw[6:offset])
    if any(d < 1 for d in shape):
        raise ValueError(f"{path}: invalid dimension sizes {shape}")
    dtype = _CODE_TO_DTYPE[code]
    count = int(np.prod(shape))
    expected = offset + count * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    arr = arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: contains non-finite elements")
    return arr
