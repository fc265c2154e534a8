"""Dataset manifests and in-memory samples."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .volume import Volume, read_volume

SPLITS = ("train", "val", "test")


@dataclass
class Record:
    id: str
    views: list[str]
    label: list[int]
    split: str
    mask: str | None = None
    boxes: list[list[int]] = field(default_factory=list)   # [h0, h1, w0, w1, s0, s1), view 0 grid


@dataclass
class DatasetManifest:
    records: list[Record]
    num_classes: int = 1
    label_mode: str = "multi-label"
    policy: str = "window(-150,250)"
    class_names: list[str] = field(default_factory=list)
    slice_axes: list[int] = field(default_factory=lambda: [2])
    root: Path = Path(".")

    def __post_init__(self):
        if self.label_mode not in ("multi-label", "multi-class"):
            raise ContractError(f"unknown label mode {self.label_mode!r}")
        if not self.class_names:
            self.class_names = [f"class{i}" for i in range(self.num_classes)]
        for r in self.records:
            if r.split not in SPLITS:
                raise ContractError(f"record {r.id}: unknown split {r.split!r}")
            if len(r.label) != self.num_classes:
                raise ContractError(f"record {r.id}: {len(r.label)} labels for K={self.num_classes}")
            if any(v not in (0, 1) for v in r.label):
                raise ContractError(f"record {r.id}: labels must be 0/1")
            if self.label_mode == "multi-class" and sum(r.label) != 1:
                raise ContractError(f"record {r.id}: multi-class labels must be one-hot")

    @property
    def num_views(self) -> int:
        return len(self.records[0].views) if self.records else len(self.slice_axes)

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def check_paths(self) -> None:
        for r in self.records:
            for p in r.views + ([r.mask] if r.mask else []):
                if not self.resolve(p).exists():
                    raise ContractError(f"record {r.id}: missing file {p}")

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes, "label_mode": self.label_mode,
                "policy": self.policy, "class_names": self.class_names,
                "slice_axes": self.slice_axes, "records": [asdict(r) for r in self.records]}


def save_manifest(path, manifest: DatasetManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=1))


def load_manifest(path, check: bool = True) -> DatasetManifest:
    path = Path(path)
    d = json.loads(path.read_text())
    records = [Record(**r) for r in d.pop("records")]
    m = DatasetManifest(records, root=path.parent, **d)
    if check:
        m.check_paths()
    return m


@dataclass
class Sample:
    id: str
    views: list[Volume]
    label: np.ndarray
    mask: np.ndarray | None = None
    boxes: list[list[int]] = field(default_factory=list)


def load_samples(manifest: DatasetManifest, split: str | None = None,
                 masks: bool = True) -> list[Sample]:
    """Read and normalise the volumes of one split (all splits when ``split`` is None)."""
    records = manifest.records if split is None else manifest.split(split)
    out = []
    for r in records:
        views = [read_volume(manifest.resolve(p), manifest.policy) for p in r.views]
        mask = None
        if masks and r.mask:
            mask = read_volume(manifest.resolve(r.mask)).data[0]
        out.append(Sample(r.id, views, np.asarray(r.label, dtype=np.int64), mask, r.boxes))
    return out
