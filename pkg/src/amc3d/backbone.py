"""Frozen 2D vision-transformer encoder applied slice by slice.

Pre-norm blocks (LayerNorm → multi-head self-attention → residual, LayerNorm →
GELU MLP → residual) over a sequence ``[class, registers, patches]``, followed
by a final LayerNorm.  Weight matrices are stored ``d_in×d_out`` and applied
as ``x @ W``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .container import checksum, read_tensors, write_tensors
from .errors import ContractError, IntegrityError
from .lora import LoraAdapterSet, apply_adapted
from .rng import make_rng, trunc_normal
from .volume import Volume

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class BackboneConfig:
    image_size: tuple[int, int] = (64, 64)
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    register_tokens: int = 0
    mlp_ratio: float = 4.0
    in_chans: int = 3
    norm_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        h, w = self.image_size
        p = self.patch_size
        if p < 1 or h % p or w % p:
            raise ContractError(f"image size {self.image_size} is not divisible by patch size {p}")
        if self.embed_dim % self.num_heads:
            raise ContractError(f"embed_dim {self.embed_dim} is not divisible by "
                                f"{self.num_heads} heads")
        if self.depth < 1 or self.register_tokens < 0:
            raise ContractError("depth must be >= 1 and register_tokens >= 0")
        if self.in_chans != 3:
            raise ContractError("slices are replicated to 3 channels; in_chans must be 3")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def seq_len(self) -> int:
        return 1 + self.register_tokens + self.num_patches

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    @property
    def patch_dim(self) -> int:
        return self.in_chans * self.patch_size ** 2

    def linear_shapes(self) -> dict[str, tuple[int, int]]:
        """Shapes of the linear maps that receive LoRA adapters."""
        d = self.embed_dim
        shapes = {"patch_embed": (self.patch_dim, d)}
        for i in range(self.depth):
            for proj in ("q", "k", "v", "proj"):
                shapes[f"blocks.{i}.attn.{proj}"] = (d, d)
        return shapes

    def to_text(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_text(cls, text: str) -> "BackboneConfig":
        return cls(**json.loads(text))


@dataclass
class BackboneWeights:
    config: BackboneConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def checksum(self) -> str:
        return checksum(self.tensors)

    def fingerprint(self) -> str:
        """Hash of the config text plus the checksum of the float32 storage form.

        A float64 copy made for a high-precision run keeps the fingerprint of
        the file it came from.
        """
        stored = {k: v if v.dtype == np.float32 else v.astype(np.float32)
                  for k, v in self.tensors.items()}
        return hashlib.sha256((self.config.to_text() + checksum(stored)).encode()).hexdigest()

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.tensors.values()))

    def astype(self, dtype) -> "BackboneWeights":
        return BackboneWeights(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})


def expected_shapes(config: BackboneConfig) -> dict[str, tuple[int, ...]]:
    d, hid = config.embed_dim, config.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (config.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (1 + config.num_patches, d),
    }
    if config.register_tokens:
        shapes["register_tokens"] = (config.register_tokens, d)
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "norm1.weight": (d,), p + "norm1.bias": (d,),
            p + "attn.q.weight": (d, d), p + "attn.q.bias": (d,),
            p + "attn.k.weight": (d, d), p + "attn.k.bias": (d,),
            p + "attn.v.weight": (d, d), p + "attn.v.bias": (d,),
            p + "attn.proj.weight": (d, d), p + "attn.proj.bias": (d,),
            p + "norm2.weight": (d,), p + "norm2.bias": (d,),
            p + "mlp.fc1.weight": (d, hid), p + "mlp.fc1.bias": (hid,),
            p + "mlp.fc2.weight": (hid, d), p + "mlp.fc2.bias": (d,),
        })
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    return shapes


def init_random_backbone(config: BackboneConfig, seed: int = 0) -> BackboneWeights:
    """Stand-in for a pretrained encoder: truncated-normal weights, unit norms."""
    rng = make_rng(seed, "backbone")
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if ".norm" in name or name.startswith("norm."):
            fill = 1.0 if name.endswith("weight") else 0.0
            tensors[name] = np.full(shape, fill, dtype=np.float32)
        else:
            tensors[name] = trunc_normal(rng, shape, std=0.02)
    return BackboneWeights(config, tensors)


def save_backbone(path, weights: BackboneWeights) -> None:
    """Write the tensor container to ``path`` and the config to ``path.config.json``."""
    path = Path(path)
    with open(path, "wb") as f:
        write_tensors(f, weights.tensors)
    Path(str(path) + ".config.json").write_text(weights.config.to_text())


def load_backbone(path, dtype=np.float32) -> BackboneWeights:
    path = Path(path)
    config = BackboneConfig.from_text(Path(str(path) + ".config.json").read_text())
    with open(path, "rb") as f:
        tensors = read_tensors(f, expect_dtype=dtype)
    expected = expected_shapes(config)
    for name, shape in expected.items():
        if name not in tensors:
            raise IntegrityError(f"backbone checkpoint is missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise IntegrityError(f"tensor {name!r} has shape {tensors[name].shape}, "
                                 f"expected {shape}")
    extra = set(tensors) - set(expected)
    if extra:
        raise IntegrityError(f"unexpected tensors in backbone checkpoint: {sorted(extra)}")
    return BackboneWeights(config, {k: tensors[k] for k in expected})


# ---------------------------------------------------------------- preprocessing

def prepare_slices(volume: Volume, axis: int = 2, mean=IMAGENET_MEAN, std=IMAGENET_STD,
                   channel: int | None = None) -> np.ndarray:
    """Cut a single-channel volume into ``S×3×H×W`` normalised RGB slices.

    ``axis`` indexes the spatial axes (0=H, 1=W, 2=S).  Multi-channel volumes
    need an explicit ``channel`` to select.
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    if data.ndim == 3:
        data = data[None]
    if data.shape[0] != 1:
        if channel is None:
            raise ContractError(f"volume has {data.shape[0]} channels; pass channel= to pick one")
        data = data[channel:channel + 1]
    if axis not in (0, 1, 2):
        raise ContractError(f"slice axis must be 0, 1 or 2, got {axis}")
    mean = np.asarray(mean, dtype=np.float64).reshape(1, 3, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(1, 3, 1, 1)
    if mean.size != 3 or std.size != 3 or (std <= 0).any():
        raise ContractError("mean and std must be 3-vectors with positive std")
    vol = data[0]
    # move slice axis first, keep the remaining two in order
    slices = np.moveaxis(vol, axis, 0)[:, None, :, :]
    slices = np.repeat(slices, 3, axis=1)
    return ((slices - mean) / std).astype(T.get_dtype())


# ---------------------------------------------------------------- forward

@dataclass
class EncodeOutput:
    class_tokens: T.Tensor           # (B, d)
    patch_tokens: T.Tensor           # (B, N, d)
    attentions: list[T.Tensor]       # per block (B, h, L, L), only when retained


@dataclass
class SliceEncodeResult:
    class_token: np.ndarray
    patch_tokens: np.ndarray
    last_block_attention: np.ndarray


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, (h // patch) * (w // patch), c * patch * patch)


def _linear(x: T.Tensor, w: np.ndarray, b: np.ndarray, adapter) -> T.Tensor:
    lead = x.shape[:-1]
    x2 = T.reshape(x, (-1, x.shape[-1]))
    y = T.add(apply_adapted(x2, w, adapter), b)
    return T.reshape(y, lead + (w.shape[1],))


def encode_slices(images, weights: BackboneWeights, adapters: LoraAdapterSet | None = None,
                  retain_attention: bool = False) -> EncodeOutput:
    """Encode a batch of ``B×3×H×W`` slices."""
    cfg = weights.config
    images = np.asarray(images.data if isinstance(images, T.Tensor) else images)
    if images.ndim != 4 or images.shape[1:] != (3,) + cfg.image_size:
        raise ContractError(f"expected slices of shape (B, 3, {cfg.image_size[0]}, "
                            f"{cfg.image_size[1]}), got {images.shape}")
    W = weights.tensors
    ad = adapters.get if adapters is not None else (lambda _: None)
    B = images.shape[0]
    d, h, dh, R = cfg.embed_dim, cfg.num_heads, cfg.head_dim, cfg.register_tokens
    L = cfg.seq_len
    dtype = T.get_dtype()

    patches = T.Tensor(patchify(images.astype(dtype, copy=False), cfg.patch_size))
    x = _linear(patches, W["patch_embed.weight"], W["patch_embed.bias"], ad("patch_embed"))
    pos = W["pos_embed"]
    x = T.add(x, pos[1:])
    cls = np.broadcast_to((W["cls_token"] + pos[0]).astype(dtype), (B, 1, d))
    parts = [T.Tensor(cls)]
    if R:
        parts.append(T.Tensor(np.broadcast_to(W["register_tokens"].astype(dtype), (B, R, d))))
    parts.append(x)
    x = T.concat(parts, axis=1)

    attentions = []
    qscale = 1.0 / np.sqrt(dh)
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        y = T.layer_norm(x, W[p + "norm1.weight"], W[p + "norm1.bias"], cfg.norm_eps)

        def heads(t):
            return T.transpose(T.reshape(t, (B, L, h, dh)), (0, 2, 1, 3))

        q = heads(_linear(y, W[p + "attn.q.weight"], W[p + "attn.q.bias"], ad(p + "attn.q")))
        k = heads(_linear(y, W[p + "attn.k.weight"], W[p + "attn.k.bias"], ad(p + "attn.k")))
        v = heads(_linear(y, W[p + "attn.v.weight"], W[p + "attn.v.bias"], ad(p + "attn.v")))
        att = T.softmax(T.matmul(T.scale(q, qscale), T.transpose(k, (0, 1, 3, 2))), axis=-1)
        if retain_attention:
            attentions.append(att)
        o = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, L, d))
        x = T.add(x, _linear(o, W[p + "attn.proj.weight"], W[p + "attn.proj.bias"],
                             ad(p + "attn.proj")))
        y = T.layer_norm(x, W[p + "norm2.weight"], W[p + "norm2.bias"], cfg.norm_eps)
        y = T.gelu(_linear(y, W[p + "mlp.fc1.weight"], W[p + "mlp.fc1.bias"], None))
        x = T.add(x, _linear(y, W[p + "mlp.fc2.weight"], W[p + "mlp.fc2.bias"], None))

    x = T.layer_norm(x, W["norm.weight"], W["norm.bias"], cfg.norm_eps)
    return EncodeOutput(T.getitem(x, (slice(None), 0)), T.getitem(x, (slice(None), slice(1 + R, None))),
                        attentions)


def encode_slice(image, weights: BackboneWeights,
                 adapters: LoraAdapterSet | None = None) -> SliceEncodeResult:
    """Encode one ``3×H×W`` slice and return plain arrays."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ContractError(f"expected a single 3×H×W slice, got shape {image.shape}")
    with T.no_grad():
        out = encode_slices(image[None], weights, adapters, retain_attention=True)
    return SliceEncodeResult(out.class_tokens.data[0], out.patch_tokens.data[0],
                             out.attentions[-1].data[0])
