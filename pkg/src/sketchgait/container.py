"""Binary tensor container used between pipeline stages.

Layout, all integers little-endian::

    magic   8 bytes  b"GSTK0001"
    dtype   u8       0 = float32, 1 = uint8
    ndim    u8
    dims    ndim x u64
    payload prod(dims) x itemsize bytes, row-major
    crc32   u32      over every preceding byte
"""

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptionError, ParameterError

MAGIC = b"GSTK0001"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype.kind == "f" and arr.dtype.itemsize == 4:
        code = 0
    elif arr.dtype == np.uint8:
        code = 1
    else:
        raise ParameterError(f"container supports float32 and uint8 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ParameterError("too many dimensions")
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    body = header + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> np.ndarray:
    if len(blob) < len(MAGIC) + 2 + 4:
        raise CorruptionError("container truncated before header end")
    if blob[:8] != MAGIC:
        raise CorruptionError(f"bad magic {blob[:8]!r}")
    code, ndim = struct.unpack_from("<BB", blob, 8)
    if code not in DTYPES:
        raise CorruptionError(f"unknown dtype code {code}")
    dims_end = 10 + 8 * ndim
    if len(blob) < dims_end + 4:
        raise CorruptionError("container truncated inside dims")
    dims = struct.unpack_from(f"<{ndim}Q", blob, 10)
    dtype = DTYPES[code]
    expected = dims_end + int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize + 4
    if len(blob) != expected:
        raise CorruptionError(f"container is {len(blob)} bytes, header implies {expected}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise CorruptionError("CRC32 mismatch")
    payload = np.frombuffer(blob, dtype=dtype, count=int(np.prod(dims)), offset=dims_end)
    return payload.reshape(dims).astype(dtype.newbyteorder("="), copy=True)


def save(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptionError(f"cannot read container {path}: {exc}") from exc
    return decode(blob)
