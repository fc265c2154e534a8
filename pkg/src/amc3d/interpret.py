"""Slice-weighted 3D saliency from class-to-patch attention, plus rollout variants."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .fusion import forward_batch, prepare_views
from .volume import Volume, write_volume

NORMALIZATIONS = ("raw", "max-normalized")
PROVENANCES = ("last-layer", "rollout", "grad-rollout", "grad-rollout-last")
MODES = {"last": "last-layer", "rollout": "rollout", "grad-rollout": "grad-rollout",
         "grad-rollout-last": "grad-rollout-last"}


@dataclass
class Heatmap3D:
    values: np.ndarray          # H×W×S, nonnegative
    normalization: str = "raw"
    provenance: str = "last-layer"

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ContractError(f"heatmap must be H×W×S, got {self.values.shape}")
        if self.normalization not in NORMALIZATIONS:
            raise ContractError(f"unknown normalization tag {self.normalization!r}")
        if self.provenance not in PROVENANCES:
            raise ContractError(f"unknown provenance tag {self.provenance!r}")
        if (self.values < 0).any():
            raise ContractError("heatmap values must be nonnegative")

    def max_normalized(self) -> "Heatmap3D":
        peak = self.values.max()
        vals = self.values / peak if peak > 0 else self.values.copy()
        return Heatmap3D(vals, "max-normalized", self.provenance)

    @property
    def mass(self) -> float:
        return float(self.values.sum(dtype=np.float64))


def _check_attention(att: np.ndarray) -> np.ndarray:
    att = np.asarray(att.data if isinstance(att, T.Tensor) else att)
    if att.ndim != 3 or att.shape[1] != att.shape[2] or att.shape[1] < 2:
        raise ContractError(f"attention must be h×L×L, got {att.shape}")
    return att


def patch_map(row: np.ndarray, grid: tuple[int, int], image_size: tuple[int, int]) -> np.ndarray:
    """Reshape patch-token scores to the patch grid and upsample bilinearly (half-pixel centres)."""
    gh, gw = grid
    if row.size != gh * gw:
        raise ContractError(f"{row.size} patch scores do not fill a {gh}×{gw} grid")
    return T.resize_linear(row.reshape(gh, gw).astype(np.float64), image_size)


def class_to_patch_map(att, grid: tuple[int, int], image_size: tuple[int, int],
                       registers: int = 0) -> np.ndarray:
    """Head-mean of the class row over patch columns, upsampled to ``image_size``."""
    att = _check_attention(att)
    L = att.shape[1]
    if L != 1 + registers + grid[0] * grid[1]:
        raise ContractError(f"attention over {L} tokens does not match 1+{registers}+"
                            f"{grid[0] * grid[1]}")
    return patch_map(att[:, 0, 1 + registers:].mean(axis=0), grid, image_size)


def volume_heatmap(per_slice_maps, slice_weights, provenance: str = "last-layer",
                   normalize: bool = False) -> Heatmap3D:
    """Stack per-slice ``H×W`` maps along the slice axis, each scaled by its slice weight."""
    maps = np.asarray(per_slice_maps, dtype=np.float64)
    a = np.asarray(slice_weights, dtype=np.float64).reshape(-1)
    if maps.ndim != 3:
        raise ContractError(f"expected S×H×W per-slice maps, got {maps.shape}")
    if maps.shape[0] != a.size:
        raise ContractError(f"{maps.shape[0]} slice maps but {a.size} slice weights")
    hm = Heatmap3D(np.moveaxis(maps * a[:, None, None], 0, -1), "raw", provenance)
    return hm.max_normalized() if normalize else hm


def _residual_average(m: np.ndarray) -> np.ndarray:
    out = 0.5 * (m + np.eye(m.shape[-1]))
    return out / out.sum(axis=-1, keepdims=True)


def rollout_matrix(head_means: Sequence[np.ndarray]) -> np.ndarray:
    """``Ā_L ··· Ā_1`` with ``Ā = rownorm(0.5·(A + I))`` for head-averaged ``A``."""
    if len(head_means) == 0:
        raise ContractError("rollout needs at least one block")
    out = _residual_average(np.asarray(head_means[0], dtype=np.float64))
    for m in head_means[1:]:
        out = _residual_average(np.asarray(m, dtype=np.float64)) @ out
    return out


def attention_rollout(attentions: Sequence, grid: tuple[int, int], image_size: tuple[int, int],
                      registers: int = 0, depth: int | None = None) -> np.ndarray:
    """Rollout class-row map for one slice from its per-block ``h×L×L`` attentions."""
    atts = [_check_attention(a) for a in attentions]
    if depth is not None and len(atts) != depth:
        raise ContractError(f"rollout needs all {depth} blocks, got {len(atts)}")
    if not atts:
        raise ContractError("rollout needs at least one block")
    R = rollout_matrix([a.mean(axis=0) for a in atts])
    return patch_map(R[0, 1 + registers:], grid, image_size)


def gradient_attention_rollout(attentions: Sequence, gradients: Sequence,
                               grid: tuple[int, int], image_size: tuple[int, int],
                               mode: str = "all-layers", registers: int = 0) -> np.ndarray:
    """Gradient-weighted rollout: ``relu(A ⊙ ∂z/∂A)`` head-averaged per block."""
    atts = [_check_attention(a) for a in attentions]
    grads = [np.asarray(g) for g in gradients]
    if len(atts) != len(grads) or not atts:
        raise ContractError(f"{len(atts)} attention maps but {len(grads)} gradient maps")
    for a, g in zip(atts, grads):
        if a.shape != g.shape:
            raise ContractError(f"gradient {g.shape} does not match attention {a.shape}")
    weighted = [np.maximum(a * g, 0.0).mean(axis=0) for a, g in zip(atts, grads)]
    if mode == "last-layer":
        row = weighted[-1][0, 1 + registers:]
    elif mode == "all-layers":
        row = rollout_matrix(weighted)[0, 1 + registers:]
    else:
        raise ContractError(f"unknown gradient rollout mode {mode!r}")
    return patch_map(row, grid, image_size)


# ---------------------------------------------------------------- end to end

def volume_saliency(views: Sequence[Volume], plugin, weights, mode: str = "last",
                    class_index: int = 0, normalize: bool = True) -> Heatmap3D:
    """3D heatmap for the first view of one subject.

    ``mode`` is ``last``, ``rollout``, ``grad-rollout`` or ``grad-rollout-last``.
    """
    if mode not in MODES:
        raise ContractError(f"unknown heatmap mode {mode!r}; expected one of {sorted(MODES)}")
    if not 0 <= class_index < plugin.num_classes:
        raise ContractError(f"class index {class_index} out of range for "
                            f"{plugin.num_classes} classes")
    cfg = weights.config
    slices = prepare_views(views, plugin)
    needs_grad = mode.startswith("grad")
    if needs_grad:
        res = forward_batch([slices], plugin, weights, retain_attention=True)
        atts = res.encodings[0].attentions
        grads = T.backward(T.getitem(res.logits, (0, class_index)), wrt=atts)
    else:
        with T.no_grad():
            res = forward_batch([slices], plugin, weights, retain_attention=True)
        atts = res.encodings[0].attentions
    a = res.view_pools[0].a[0]
    S = a.size
    args = (cfg.grid, cfg.image_size)
    R = cfg.register_tokens
    maps = []
    for s in range(S):
        per_block = [blk.data[s] for blk in atts]
        if mode == "last":
            maps.append(class_to_patch_map(per_block[-1], *args, registers=R))
        elif mode == "rollout":
            maps.append(attention_rollout(per_block, *args, registers=R, depth=cfg.depth))
        else:
            g = [gr[s] for gr in grads]
            maps.append(gradient_attention_rollout(
                per_block, g, *args, mode="last-layer" if mode == "grad-rollout-last" else "all-layers",
                registers=R))
    return volume_heatmap(np.stack(maps), a, MODES[mode], normalize)


def box_mass_ratio(heatmap: Heatmap3D, boxes: Sequence[Sequence[int]]) -> float:
    """Heatmap mass inside the union of boxes relative to a uniform heatmap's share."""
    if not boxes:
        raise ContractError("no boxes given")
    inside = np.zeros(heatmap.values.shape, dtype=bool)
    for h0, h1, w0, w1, s0, s1 in boxes:
        inside[h0:h1, w0:w1, s0:s1] = True
    total = heatmap.mass
    if total <= 0:
        return 0.0
    return float(heatmap.values[inside].sum() / total / inside.mean())


def save_heatmap(path, heatmap: Heatmap3D) -> None:
    write_volume(path, Volume(heatmap.values.astype(np.float32)[None],
                              modality=f"heatmap:{heatmap.provenance}",
                              normalization=heatmap.normalization))


def dump_ascii(heatmap: Heatmap3D, path, precision: int = 4) -> None:
    """Per-slice matrix dump for debugging."""
    lines = []
    for s in range(heatmap.values.shape[2]):
        lines.append(f"# slice {s}")
        for row in heatmap.values[:, :, s]:
            lines.append(" ".join(f"{v:.{precision}f}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
