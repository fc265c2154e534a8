"""Auxiliary voxel supervision on patch tokens.

Patch tokens of every slice are laid back onto their patch grid and stacked
along the slice axis into a ``d×gh×gw×S`` token volume, which a small 3D
decoder (upsample → 3×3×3 conv → instance norm → leaky ReLU, repeated, then a
1×1×1 conv) maps to voxel logits.  Training adds a Dice + cross-entropy loss on
the cases that have masks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .rng import make_rng


def assemble_token_volume(patch_tokens, grid: tuple[int, int]) -> T.Tensor:
    """Stack per-slice ``N×d`` patch tokens into a ``d×gh×gw×S`` token volume.

    ``patch_tokens`` is either an ``S×N×d`` tensor or a list of ``N×d`` arrays.
    """
    if isinstance(patch_tokens, (list, tuple)):
        shapes = {tuple(np.shape(p.data if isinstance(p, T.Tensor) else p)) for p in patch_tokens}
        if len(shapes) != 1:
            raise ContractError(f"patch token matrices differ in shape: {sorted(shapes)}")
        patch_tokens = T.stack([T.as_tensor(p) for p in patch_tokens], axis=0)
    tokens = T.as_tensor(patch_tokens)
    if tokens.ndim != 3:
        raise ContractError(f"expected S×N×d patch tokens, got {tokens.shape}")
    S, N, d = tokens.shape
    gh, gw = grid
    if N != gh * gw:
        raise ContractError(f"{N} patch tokens do not fill a {gh}×{gw} grid")
    return T.transpose(T.reshape(tokens, (S, gh, gw, d)), (3, 1, 2, 0))


def token_volume_slice(F: T.Tensor, s: int) -> np.ndarray:
    """Recover slice ``s`` of a token volume as its ``N×d`` patch-token matrix."""
    d, gh, gw, _ = F.shape
    return F.data[..., s].reshape(d, gh * gw).T


@dataclass(frozen=True)
class SegDecoderConfig:
    in_channels: int = 64
    channels: tuple[int, ...] = (16, 8, 4)
    upsample: tuple[tuple[int, int, int], ...] = ((2, 2, 1), (2, 2, 1), (2, 2, 1))
    num_classes: int = 2
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "upsample", tuple(tuple(int(f) for f in u) for u in self.upsample))
        if len(self.channels) != len(self.upsample):
            raise ContractError("need one upsampling factor triple per decoder stage")
        if self.num_classes < 2:
            raise ContractError("segmentation needs at least two classes (background + one)")
        if self.kernel % 2 == 0:
            raise ContractError("decoder kernel must be odd")

    def total_upsample(self) -> tuple[int, int, int]:
        tot = np.ones(3, dtype=int)
        for u in self.upsample:
            tot *= np.asarray(u)
        return tuple(int(t) for t in tot)


def default_decoder_config(backbone_config, num_classes: int = 2,
                           channels: Sequence[int] = (16, 8, 4)) -> SegDecoderConfig:
    """Split the patch size into per-stage in-plane factors; the slice axis is not resampled."""
    p = backbone_config.patch_size
    stages = len(channels)
    factors = []
    for k in range(stages):
        f = int(round(p ** (1.0 / (stages - k))))
        while p % f:
            f -= 1
        factors.append(f)
        p //= f
    if p != 1:
        raise ContractError(f"cannot split patch size {backbone_config.patch_size} into "
                            f"{stages} integer stages")
    return SegDecoderConfig(backbone_config.embed_dim, tuple(channels),
                            tuple((f, f, 1) for f in factors), num_classes)


@dataclass
class SegDecoder:
    config: SegDecoderConfig
    params: dict[str, T.Tensor] = field(default_factory=dict)

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def __call__(self, F: T.Tensor, target: tuple[int, int, int]) -> T.Tensor:
        cfg = self.config
        F = T.as_tensor(F)
        if F.ndim != 4 or F.shape[0] != cfg.in_channels:
            raise ContractError(f"token volume {F.shape} does not have {cfg.in_channels} channels")
        size = np.asarray(F.shape[1:])
        if tuple(size * np.asarray(cfg.total_upsample())) != tuple(target):
            raise ContractError(f"decoder maps grid {tuple(size)} to "
                                f"{tuple(size * np.asarray(cfg.total_upsample()))}, target is "
                                f"{tuple(target)}")
        x = T.reshape(F, (1,) + F.shape)
        for i, u in enumerate(cfg.upsample):
            size = size * np.asarray(u)
            x = T.upsample_linear(x, tuple(int(s) for s in size))
            x = T.conv3d(x, self.params[f"stage{i}.conv.weight"], self.params[f"stage{i}.conv.bias"])
            x = T.instance_norm(x, self.params[f"stage{i}.norm.weight"],
                                self.params[f"stage{i}.norm.bias"])
            x = T.leaky_relu(x, 0.01)
        x = T.conv3d(x, self.params["head.weight"], self.params["head.bias"])
        return T.reshape(x, x.shape[1:])


def init_decoder(config: SegDecoderConfig, seed: int = 0, zero_final: bool = False,
                 stream: str = "decoder") -> SegDecoder:
    rng = make_rng(seed, stream)
    k = config.kernel
    params: dict[str, T.Tensor] = {}
    cin = config.in_channels
    for i, cout in enumerate(config.channels):
        fan_in = cin * k ** 3
        std = np.sqrt(2.0 / ((1 + 0.01 ** 2) * fan_in))
        params[f"stage{i}.conv.weight"] = T.Tensor(rng.standard_normal((cout, cin, k, k, k)) * std,
                                                   requires_grad=True)
        params[f"stage{i}.conv.bias"] = T.Tensor(np.zeros(cout), requires_grad=True)
        params[f"stage{i}.norm.weight"] = T.Tensor(np.ones(cout), requires_grad=True)
        params[f"stage{i}.norm.bias"] = T.Tensor(np.zeros(cout), requires_grad=True)
        cin = cout
    head = np.zeros((config.num_classes, cin, 1, 1, 1)) if zero_final else \
        rng.standard_normal((config.num_classes, cin, 1, 1, 1)) * np.sqrt(1.0 / cin)
    params["head.weight"] = T.Tensor(head, requires_grad=True)
    params["head.bias"] = T.Tensor(np.zeros(config.num_classes), requires_grad=True)
    return SegDecoder(config, params)


def decode_voxels(F, decoder: SegDecoder, target: tuple[int, int, int]) -> T.Tensor:
    return decoder(F, target)


# ---------------------------------------------------------------- losses

def _check_mask(mask: np.ndarray, shape, k_seg: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != tuple(shape):
        raise ContractError(f"mask shape {mask.shape} does not match logits {tuple(shape)}")
    if not np.issubdtype(mask.dtype, np.integer):
        if not np.all(np.equal(np.mod(mask, 1), 0)):
            raise ContractError("mask labels must be integers")
        mask = mask.astype(np.int64)
    if mask.size and (mask.min() < 0 or mask.max() >= k_seg):
        raise ContractError(f"mask labels must lie in [0, {k_seg}), found "
                            f"[{mask.min()}, {mask.max()}]")
    return mask


def one_hot(mask: np.ndarray, k: int, dtype=None) -> np.ndarray:
    return (np.arange(k).reshape((k,) + (1,) * mask.ndim) == mask[None]).astype(dtype or T.get_dtype())


def dice_per_class(probs: np.ndarray, target_onehot: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Soft Dice coefficient per class for ``K×...`` probabilities and one-hot targets."""
    axes = tuple(range(1, probs.ndim))
    inter = (probs * target_onehot).sum(axis=axes)
    return (2 * inter + eps) / (probs.sum(axis=axes) + target_onehot.sum(axis=axes) + eps)


def seg_loss(logits, mask, k_seg: int, eps: float = 1e-5) -> T.Tensor:
    """Soft Dice loss (averaged over classes) plus voxel-mean cross-entropy."""
    logits = T.as_tensor(logits)
    if logits.shape[0] != k_seg:
        raise ContractError(f"logits have {logits.shape[0]} classes, expected {k_seg}")
    mask = _check_mask(mask, logits.shape[1:], k_seg)
    y = one_hot(mask, k_seg, logits.dtype)
    axes = tuple(range(1, logits.ndim))
    logp = T.log_softmax(logits, axis=0)
    p = T.softmax(logits, axis=0)
    inter = T.sum_(T.mul(p, y), axis=axes)
    denom = T.add(T.sum_(p, axis=axes), y.sum(axis=axes) + eps)
    dice = T.div(T.add(T.scale(inter, 2.0), eps), denom)
    dice_loss = T.sub(1.0, T.mean(dice))
    ce = T.scale(T.mean(T.sum_(T.mul(logp, y), axis=0)), -1.0)
    return T.add(dice_loss, ce)


def total_loss(cls_loss, seg_losses: Sequence, lambda_seg: float) -> T.Tensor:
    """Classification loss plus ``lambda_seg`` times the mean segmentation loss over masked cases."""
    if lambda_seg < 0:
        raise ContractError("lambda_seg must be non-negative")
    cls_loss = T.as_tensor(cls_loss)
    if not seg_losses or lambda_seg == 0:
        return cls_loss
    seg = seg_losses[0]
    for s in seg_losses[1:]:
        seg = T.add(seg, s)
    return T.add(cls_loss, T.scale(seg, lambda_seg / len(seg_losses)))
