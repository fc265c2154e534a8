"""Slice fusion by query attention pooling, multi-view fusion and the full forward pass."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import BackboneWeights, EncodeOutput, encode_slices, prepare_slices
from .errors import ContractError, FingerprintError
from .rng import make_rng, trunc_normal
from .volume import Volume


@dataclass
class PoolResult:
    weights: T.Tensor      # (..., S)
    embedding: T.Tensor    # (..., d)

    @property
    def a(self) -> np.ndarray:
        return self.weights.data

    @property
    def v(self) -> np.ndarray:
        return self.embedding.data


def attention_pool(H, q) -> PoolResult:
    """Softmax-weighted average of the rows of ``H`` scored against query ``q``.

    ``H`` is ``S×d`` (or ``B×S×d``), ``q`` is a ``d``-vector.  Scores are
    raw dot products divided by ``sqrt(d)``.
    """
    H, q = T.as_tensor(H), T.as_tensor(q)
    if H.ndim < 2:
        raise ContractError(f"attention_pool: H must be S×d, got {H.shape}")
    if q.shape != (H.shape[-1],):
        raise ContractError(f"attention_pool: query of shape {q.shape} does not match d={H.shape[-1]}")
    if H.shape[-2] < 1:
        raise ContractError("attention_pool: need at least one row")
    scores = T.scale(T.matmul(H, q), 1.0 / np.sqrt(H.shape[-1]))
    a = T.softmax(scores, axis=-1)
    if H.ndim == 2:
        v = T.matmul(a, H)
    else:
        v = T.reshape(T.matmul(T.reshape(a, a.shape[:-1] + (1, a.shape[-1])), H),
                      H.shape[:-2] + (H.shape[-1],))
    return PoolResult(a, v)


def fuse_views(view_embeddings: Sequence, q_t) -> tuple[T.Tensor, PoolResult | None]:
    """Fuse per-view embeddings; a single view passes through unchanged."""
    if len(view_embeddings) == 0:
        raise ContractError("fuse_views: no views given")
    embs = [T.as_tensor(v) for v in view_embeddings]
    d = embs[0].shape[-1]
    if any(e.shape != embs[0].shape for e in embs):
        raise ContractError(f"fuse_views: view embeddings differ in shape {[e.shape for e in embs]}")
    if len(embs) == 1:
        return embs[0], None
    pool = attention_pool(T.stack(embs, axis=-2), q_t)
    if pool.embedding.shape[-1] != d:
        raise ContractError("fuse_views: unexpected embedding width")
    return pool.embedding, pool


def baseline_pool(H, kind: str) -> T.Tensor:
    """Per-dimension average, max (first index on ties) or lower median over slices."""
    H = T.as_tensor(H)
    if H.ndim != 2 or H.shape[0] < 1:
        raise ContractError(f"baseline_pool: H must be S×d with S >= 1, got {H.shape}")
    S, d = H.shape
    cols = np.arange(d)
    if kind == "average":
        return T.mean(H, axis=0)
    if kind == "max":
        return T.getitem(H, (np.argmax(H.data, axis=0), cols))
    if kind == "median":
        order = np.argsort(H.data, axis=0, kind="stable")
        return T.getitem(H, (order[(S - 1) // 2], cols))
    raise ContractError(f"baseline_pool: unknown kind {kind!r}")


@dataclass
class ClassifierHead:
    weight: T.Tensor            # d×K
    bias: T.Tensor              # K
    activation: str = "sigmoid"

    def __post_init__(self):
        if self.activation not in ("sigmoid", "softmax"):
            raise ContractError(f"unknown head activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ContractError(f"head weight {self.weight.shape} and bias {self.bias.shape} "
                                "are inconsistent")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def __call__(self, v) -> T.Tensor:
        return T.add(T.matmul(v, self.weight), self.bias)

    def parameters(self) -> list[T.Tensor]:
        return [self.weight, self.bias]

    def probabilities(self, logits: np.ndarray) -> np.ndarray:
        from scipy.special import expit, softmax
        if self.activation == "sigmoid":
            return expit(logits)
        return softmax(logits, axis=-1)


def new_head(d: int, num_classes: int, activation: str = "sigmoid", seed: int = 0,
             stream: str = "head") -> ClassifierHead:
    if num_classes < 1:
        raise ContractError("a classifier head needs at least one class")
    rng = make_rng(seed, stream)
    return ClassifierHead(T.Tensor(trunc_normal(rng, (d, num_classes), std=0.02), requires_grad=True),
                          T.Tensor(np.zeros(num_classes), requires_grad=True), activation)


# ---------------------------------------------------------------- full pipeline

@dataclass
class ForwardResult:
    logits: T.Tensor                         # (B, K)
    view_pools: list[PoolResult]             # per view, batched over B
    fusion_pool: PoolResult | None
    encodings: list[EncodeOutput] = field(default_factory=list)
    seg_logits: list[T.Tensor] | None = None  # per volume, K_seg×H×W×S (first view)


def forward_batch(batch_slices: Sequence[Sequence[np.ndarray]], plugin, weights: BackboneWeights,
                  retain_attention: bool = False, return_seg: bool | Sequence[int] = False,
                  frozen: bool = False) -> ForwardResult:
    """Run the pipeline on prepared slices.

    ``batch_slices[b][i]`` is the ``S×3×H×W`` slice stack of view ``i`` of
    volume ``b``; all volumes must share ``S`` per view.  ``return_seg`` is a
    flag or the batch indices to decode.  With ``frozen`` the adapters are
    skipped (the plain frozen-backbone pipeline).
    """
    if not batch_slices:
        raise ContractError("forward_batch: empty batch")
    V = plugin.num_views
    B = len(batch_slices)
    for item in batch_slices:
        if len(item) != V:
            raise ContractError(f"plugin expects {V} view(s), got {len(item)}")
    view_embs, pools, encodings = [], [], []
    for i in range(V):
        stacks = [np.asarray(item[i]) for item in batch_slices]
        S = stacks[0].shape[0]
        if any(s.shape != stacks[0].shape for s in stacks):
            raise ContractError(f"view {i}: volumes in a batch must share geometry, got "
                                f"{[s.shape for s in stacks]}")
        adapters = None if frozen else plugin.adapters[i]
        enc = encode_slices(np.concatenate(stacks, axis=0), weights, adapters,
                            retain_attention=retain_attention)
        encodings.append(enc)
        H = T.reshape(enc.class_tokens, (B, S, enc.class_tokens.shape[-1]))
        pool = attention_pool(H, plugin.view_queries[i])
        pools.append(pool)
        view_embs.append(pool.embedding)
    v, fpool = fuse_views(view_embs, plugin.task_query)
    logits = plugin.head(v)
    seg = None
    seg_items = range(B) if return_seg is True else (return_seg or ())
    if len(seg_items) and plugin.decoder is not None:
        from .auxseg import assemble_token_volume
        enc = encodings[0]
        S = batch_slices[0][0].shape[0]
        seg = []
        for b in seg_items:
            toks = T.getitem(enc.patch_tokens, slice(b * S, (b + 1) * S))
            F = assemble_token_volume(toks, weights.config.grid)
            seg.append(plugin.decoder(F, (weights.config.image_size[0],
                                          weights.config.image_size[1], S)))
    return ForwardResult(logits, pools, fpool, encodings, seg)


def prepare_views(views: Sequence[Volume], plugin) -> list[np.ndarray]:
    if len(views) != plugin.num_views:
        raise ContractError(f"plugin expects {plugin.num_views} view(s), got {len(views)}")
    return [prepare_slices(vol, axis=plugin.slice_axes[i]) for i, vol in enumerate(views)]


def classify_volume(views: Sequence[Volume], plugin, weights: BackboneWeights,
                    retain_attention: bool = False, frozen: bool = False,
                    check: bool = True) -> ForwardResult:
    """Logits for one subject given its views (one :class:`Volume` per view)."""
    if check and plugin.backbone_fingerprint and plugin.backbone_fingerprint != weights.fingerprint():
        raise FingerprintError(f"plugin expects backbone {plugin.backbone_fingerprint}, "
                               f"got {weights.fingerprint()}")
    slices = prepare_views(views, plugin)
    H, W = weights.config.image_size
    for i, s in enumerate(slices):
        if s.shape[2:] != (H, W):
            raise ContractError(f"view {i}: slices are {s.shape[2:]}, backbone expects {(H, W)}")
    return forward_batch([slices], plugin, weights, retain_attention=retain_attention, frozen=frozen)
