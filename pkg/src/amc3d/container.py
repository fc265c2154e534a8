"""Binary tensor container ("AMC3").

Layout, all little-endian::

    magic    4 bytes  b"AMC3"
    version  u32
    count    u32
    count × { name_len u16, name utf-8, dtype u8 (0=f32, 1=f64),
              rank u8, extents u64 × rank, raw row-major data }
"""
from __future__ import annotations

import hashlib
import io
import struct
from typing import BinaryIO, Mapping

import numpy as np

from .errors import ContractError, FormatError, IntegrityError

MAGIC = b"AMC3"
VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IntegrityError(f"truncated container while reading {what}")
    return buf


def write_tensors(f: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    f.write(MAGIC)
    f.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_TAGS:
            raise ContractError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(struct.pack("<BB", DTYPE_TAGS[dt], arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensors(f: BinaryIO, expect_dtype=None) -> dict[str, np.ndarray]:
    """Read a container; ``expect_dtype`` rejects files stored at another precision."""
    magic = _read_exact(f, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
        name = _read_exact(f, nlen, "name").decode("utf-8")
        tag, rank = struct.unpack("<BB", _read_exact(f, 2, f"{name} dtype"))
        if tag not in TAG_DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype tag {tag}")
        dt = TAG_DTYPES[tag]
        if expect_dtype is not None and dt != np.dtype(expect_dtype):
            raise FormatError(f"tensor {name!r} stored as {dt.name}, run precision is "
                              f"{np.dtype(expect_dtype).name}; refusing to cast")
        shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, f"{name} extents"))
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        data = np.frombuffer(_read_exact(f, nbytes, f"{name} data"), dtype=dt).reshape(shape)
        out[name] = data.astype(dt.newbyteorder("="), copy=True)
    return out


def tensors_to_bytes(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_tensors(buf, tensors)
    return buf.getvalue()


def checksum(tensors: Mapping[str, np.ndarray]) -> str:
    """SHA-256 of the serialized container; order of insertion matters."""
    return hashlib.sha256(tensors_to_bytes(tensors)).hexdigest()
