"""Volumes, intensity normalisation and the ``AMCV`` volume file format.

File layout (little-endian)::

    b"AMCV"  version u32  dtype u8 (0=f32, 1=f64, 2=i32)
    C, H, W, S            u64 × 4
    spacing               f64 × 3   (mm)
    modality              u16 length + utf-8
    normalisation tag     u16 length + utf-8   ("" when raw)
    data                  C·H·W·S values, row-major
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, IntegrityError
from .tensor import resize_linear

MAGIC = b"AMCV"
VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i4"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass
class Volume:
    """A channel-first ``C×H×W×S`` volume with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: str = ""
    normalization: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.ndim != 4:
            raise ContractError(f"volume data must be C×H×W×S, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ContractError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0]


# ---------------------------------------------------------------- normalisation

_WINDOW = re.compile(r"^window\(\s*([-+0-9.eE]+)\s*,\s*([-+0-9.eE]+)\s*\)$")
_PCLIP = re.compile(r"^percentile-clip(?:\(\s*([0-9.eE]+)\s*,\s*([0-9.eE]+)\s*\))?$")


def parse_policy(policy: str) -> tuple[str, tuple[float, ...]]:
    policy = policy.strip()
    if policy in ("", "none"):
        return "none", ()
    if policy == "z-score":
        return "z-score", ()
    m = _WINDOW.match(policy)
    if m:
        lo, hi = float(m.group(1)), float(m.group(2))
        if hi <= lo:
            raise ContractError(f"window upper bound must exceed lower bound: {policy}")
        return "window", (lo, hi)
    m = _PCLIP.match(policy)
    if m:
        lo, hi = (float(m.group(1)), float(m.group(2))) if m.group(1) else (0.5, 99.5)
        return "percentile-clip", (lo, hi)
    raise ContractError(f"unknown normalisation policy {policy!r}")


def normalize_volume(volume: Volume, policy: str) -> Volume:
    """Apply an intensity policy.

    Re-applying the policy a volume already carries is a no-op; applying a
    different one is refused.
    """
    kind, args = parse_policy(policy)
    if kind == "none" or volume.normalization == policy.strip():
        return volume
    if volume.normalization:
        raise ContractError(f"volume already normalised with {volume.normalization!r}")
    x = volume.data.astype(np.float32)
    if kind == "window":
        lo, hi = args
        x = (np.clip(x, lo, hi) - lo) / (hi - lo)
    elif kind == "z-score":
        std = x.std()
        x = (x - x.mean()) / (std if std > 0 else 1.0)
    else:
        lo, hi = np.percentile(x, args)
        x = (np.clip(x, lo, hi) - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    return replace(volume, data=x.astype(np.float32), normalization=policy.strip())


def resize_volume(volume: Volume, size: tuple[int, int, int]) -> Volume:
    """Trilinear resize of the spatial axes; spacing is rescaled to keep the physical extent."""
    h, w, s = volume.data.shape[1:]
    data = resize_linear(volume.data.astype(np.float64), size).astype(volume.data.dtype)
    spacing = tuple(sp * n / m for sp, n, m in zip(volume.spacing, (h, w, s), size))
    return replace(volume, data=data, spacing=spacing)


def largest_axis(volume: Volume) -> int:
    """Spatial axis (0=H, 1=W, 2=S) with the largest extent; ties go to the last one."""
    extents = volume.data.shape[1:]
    return max(range(3), key=lambda a: (extents[a], a))


# ---------------------------------------------------------------- file format

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def write_volume(path, volume: Volume) -> None:
    data = volume.data
    dt = data.dtype.newbyteorder("<")
    if dt not in _DTYPE_TAGS:
        raise ContractError(f"unsupported volume dtype {data.dtype}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IB", VERSION, _DTYPE_TAGS[dt]))
        f.write(struct.pack("<4Q", *data.shape))
        f.write(struct.pack("<3d", *volume.spacing))
        f.write(_pack_str(volume.modality))
        f.write(_pack_str(volume.normalization))
        f.write(np.ascontiguousarray(data, dtype=dt).tobytes())


def read_volume(path, policy: str | None = None) -> Volume:
    """Read a volume file, optionally applying a normalisation policy."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    try:
        version, tag = struct.unpack_from("<IB", raw, 4)
        pos = 9
        shape = struct.unpack_from("<4Q", raw, pos)
        pos += 32
        spacing = struct.unpack_from("<3d", raw, pos)
        pos += 24
        strings = []
        for _ in range(2):
            (n,) = struct.unpack_from("<H", raw, pos)
            strings.append(raw[pos + 2:pos + 2 + n].decode("utf-8"))
            pos += 2 + n
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if tag not in _TAG_DTYPES:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    dt = _TAG_DTYPES[tag]
    n = int(np.prod(shape, dtype=np.int64))
    if len(raw) - pos != n * dt.itemsize:
        raise IntegrityError(f"{path}: expected {n * dt.itemsize} data bytes, found {len(raw) - pos}")
    data = np.frombuffer(raw, dtype=dt, offset=pos).reshape(shape).astype(dt.newbyteorder("="))
    vol = Volume(data, spacing, strings[0], strings[1])
    return normalize_volume(vol, policy) if policy else vol
