"""Seeded synthetic CT-like lesion dataset.

Negatives are smoothed noise around a soft-tissue baseline (HU-like units);
positives add one to three bright ellipsoids.  In two-view mode a cubic field
is rendered and each view samples it along a different axis with its own
acquisition noise.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractError
from .manifest import DatasetManifest, Record, save_manifest
from .rng import make_rng
from .volume import Volume, write_volume


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 400
    size: tuple[int, int, int] = (64, 64, 16)   # H, W, S
    pos_rate: float = 0.3
    lesions: tuple[int, int] = (1, 3)
    intensity: tuple[float, float] = (120.0, 200.0)    # HU offset
    radius: tuple[float, float] = (8.0, 14.0)          # in-plane, voxels
    radius_s: tuple[float, float] = (1.0, 2.5)         # through-plane, voxels
    background_hu: float = 40.0
    texture_hu: float = 15.0
    noise_hu: float = 15.0
    smoothing: float = 2.0
    views: int = 1
    masks: bool = False
    policy: str = "window(-150,250)"
    splits: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        if not 0 < self.pos_rate < 1:
            raise ContractError(f"positive rate must lie in (0, 1), got {self.pos_rate}")
        if self.views not in (1, 2):
            raise ContractError("the generator renders one or two views")
        if self.n < 1:
            raise ContractError("need at least one volume")
        H, W, S = self.size
        if 2 * self.radius[1] + 1 > min(H, W) or 2 * self.radius_s[1] + 1 > S:
            raise ContractError(f"lesion radii {self.radius}/{self.radius_s} do not fit a "
                                f"{H}×{W}×{S} volume")
        if self.views == 2 and (H != W or 2 * self.radius[1] + 1 > S * (H // S)):
            raise ContractError("two-view mode needs square slices")
        if self.lesions[0] < 1 or self.lesions[1] < self.lesions[0]:
            raise ContractError(f"bad lesion count range {self.lesions}")


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r = sum(((g - c) / rad) ** 2 for g, c, rad in zip(grids, center, radii))
    return r <= 1.0


def _background(rng, shape, spec: SyntheticSpec) -> np.ndarray:
    tex = gaussian_filter(rng.standard_normal(shape), spec.smoothing, mode="wrap")
    tex *= spec.texture_hu / max(tex.std(), 1e-12)
    return spec.background_hu + tex


def _lesion_field(rng, shape, radii_range, spec: SyntheticSpec):
    """Random ellipsoids inside ``shape``; returns (offset field, label mask, boxes)."""
    offset = np.zeros(shape)
    mask = np.zeros(shape, dtype=np.int32)
    boxes = []
    for _ in range(rng.integers(spec.lesions[0], spec.lesions[1] + 1)):
        radii = [rng.uniform(*r) for r in radii_range]
        center = [rng.uniform(rad, n - 1 - rad) for rad, n in zip(radii, shape)]
        inside = _ellipsoid(shape, center, radii)
        if not inside.any():
            continue
        offset[inside] = np.maximum(offset[inside], rng.uniform(*spec.intensity))
        mask[inside] = 1
        idx = np.nonzero(inside)
        boxes.append([int(v) for a in idx for v in (a.min(), a.max() + 1)])
    return offset, mask, boxes


def _render(rng, positive: bool, spec: SyntheticSpec):
    H, W, S = spec.size
    if spec.views == 1:
        vol = _background(rng, (H, W, S), spec)
        mask = np.zeros((H, W, S), dtype=np.int32)
        boxes = []
        if positive:
            offset, mask, boxes = _lesion_field(rng, (H, W, S), (spec.radius, spec.radius,
                                                                 spec.radius_s), spec)
            vol = vol + offset
        vol += rng.normal(0, spec.noise_hu, vol.shape)
        return [vol], mask, boxes
    # cubic field; view 0 samples every k-th slice along S, view 1 along H
    k = H // S
    cube = _background(rng, (H, H, H), spec)
    cmask = np.zeros((H, H, H), dtype=np.int32)
    if positive:
        offset, cmask, _ = _lesion_field(rng, (H, H, H), (spec.radius,) * 3, spec)
        cube = cube + offset
    pick = np.arange(S) * k + k // 2
    v0 = cube[:, :, pick]
    v1 = np.moveaxis(cube[pick, :, :], 0, 2)
    mask = cmask[:, :, pick]
    views = [v + rng.normal(0, spec.noise_hu, v.shape) for v in (v0, v1)]
    boxes = []
    if mask.any():
        idx = np.nonzero(mask)
        boxes.append([int(v) for a in idx for v in (a.min(), a.max() + 1)])
    return views, mask, boxes


def _assign_splits(rng, labels: np.ndarray, fractions) -> list[str]:
    """Stratified split so every split sees both classes when possible."""
    out = [""] * len(labels)
    for cls in (0, 1):
        idx = rng.permutation(np.nonzero(labels == cls)[0])
        n = len(idx)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        for j, i in enumerate(idx):
            out[i] = "train" if j < n_train else ("val" if j < n_train + n_val else "test")
    return out


def generate_synthetic_dataset(out_dir, spec: SyntheticSpec = SyntheticSpec(),
                               seed: int = 0) -> DatasetManifest:
    """Write volumes (and masks when requested) under ``out_dir`` plus ``manifest.json``."""
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    if spec.masks:
        (out / "masks").mkdir(exist_ok=True)
    rng = make_rng(seed, "synthetic", "labels")
    labels = (rng.random(spec.n) < spec.pos_rate).astype(int)
    splits = _assign_splits(make_rng(seed, "synthetic", "splits"), labels, spec.splits)
    records = []
    for i in range(spec.n):
        vrng = make_rng(seed, "synthetic", "volume", i)
        views, mask, boxes = _render(vrng, bool(labels[i]), spec)
        rid = f"case{i:04d}"
        paths = []
        for v, data in enumerate(views):
            rel = f"volumes/{rid}_v{v}.amcv"
            write_volume(out / rel, Volume(data.astype(np.float32), modality="synthetic-CT"))
            paths.append(rel)
        mrel = None
        if spec.masks:
            mrel = f"masks/{rid}_mask.amcv"
            write_volume(out / mrel, Volume(mask.astype(np.int32), modality="mask"))
        records.append(Record(rid, paths, [int(labels[i])], splits[i], mrel, boxes))
    manifest = DatasetManifest(records, 1, "multi-label", spec.policy, ["lesion"],
                               [2] * spec.views, out)
    save_manifest(out / "manifest.json", manifest)
    return manifest
