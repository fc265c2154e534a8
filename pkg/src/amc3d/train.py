"""Focal loss, AdamW, augmentation and the plugin training loop."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .auxseg import seg_loss, total_loss
from .backbone import BackboneWeights, prepare_slices
from .errors import ContractError, NumericError
from .fusion import forward_batch
from .manifest import Sample
from .metrics import compute_auroc
from .rng import make_rng

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- focal loss

@dataclass(frozen=True)
class FocalLossConfig:
    gamma: float = 2.0
    alpha: float = 0.25

    def __post_init__(self):
        if self.gamma < 0:
            raise ContractError(f"focal gamma must be >= 0, got {self.gamma}")
        if not 0 < self.alpha <= 1:
            raise ContractError(f"focal alpha must lie in (0, 1], got {self.alpha}")


def focal_loss(logits, targets, config: FocalLossConfig = FocalLossConfig(),
               mode: str = "multi-label") -> T.Tensor:
    """Mean of ``-alpha·(1-p_t)^gamma·log p_t`` over batch and classes.

    ``p_t`` is the probability of the true outcome: per-class sigmoid in
    multi-label mode, softmax of the true class in multi-class mode.
    """
    logits = T.as_tensor(logits)
    y = np.asarray(targets)
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, -1))
    if mode == "multi-class" and y.ndim == 1 and y.shape[0] == logits.shape[0] \
            and np.issubdtype(y.dtype, np.integer):
        if y.min() < 0 or y.max() >= logits.shape[1]:
            raise ContractError("class index out of range")
        y = np.eye(logits.shape[1], dtype=np.int64)[y]
    y = y.reshape(logits.shape) if y.size == logits.data.size else y
    if y.shape != logits.shape:
        raise ContractError(f"targets {y.shape} do not match logits {logits.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("targets must be 0/1")
    if mode == "multi-label":
        sign = (2.0 * y - 1.0).astype(logits.dtype)
        s = T.mul(logits, sign)
        logp_t = T.log_sigmoid(s)
        if config.gamma == 0:
            per = logp_t
        else:
            # (1 - p_t)^gamma = exp(gamma · log sigmoid(-s))
            per = T.mul(T.exp(T.scale(T.log_sigmoid(T.scale(s, -1.0)), config.gamma)), logp_t)
        return T.scale(T.mean(per), -config.alpha)
    if mode == "multi-class":
        if not (y.sum(axis=1) == 1).all():
            raise ContractError("multi-class targets must be one-hot")
        logp = T.log_softmax(logits, axis=-1)
        logp_t = T.sum_(T.mul(logp, y.astype(logits.dtype)), axis=-1)
        if config.gamma == 0:
            per = logp_t
        else:
            one_minus = T.sub(1.0, T.exp(logp_t))
            per = T.mul(T.power(T.add(one_minus, 1e-12), config.gamma), logp_t)
        return T.scale(T.mean(per), -config.alpha)
    raise ContractError(f"unknown label mode {mode!r}")


# ---------------------------------------------------------------- optimiser

@dataclass(frozen=True)
class OptimizerConfig:
    lora_lr: float = 1e-4
    lora_weight_decay: float = 1e-5
    head_lr: float = 1e-3
    head_weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_epochs: int = 100

    def __post_init__(self):
        if min(self.lora_lr, self.head_lr) <= 0:
            raise ContractError("learning rates must be positive")
        if min(self.lora_weight_decay, self.head_weight_decay) < 0:
            raise ContractError("weight decay must be non-negative")

    def group_hparams(self) -> dict[str, tuple[float, float]]:
        return {"lora": (self.lora_lr, self.lora_weight_decay),
                "head": (self.head_lr, self.head_weight_decay)}


def adamw_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
                 lr: float, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One decoupled-weight-decay Adam update; returns new ``(param, m, v)``.

    ``step`` counts from 1.
    """
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    param = param * (1 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


class AdamW:
    """AdamW over named parameter groups with per-group lr and weight decay."""

    def __init__(self, groups: dict[str, list[T.Tensor]], config: OptimizerConfig = OptimizerConfig(),
                 frozen: BackboneWeights | None = None):
        hp = config.group_hparams()
        unknown = set(groups) - set(hp)
        if unknown:
            raise ContractError(f"unknown parameter groups {sorted(unknown)}")
        self.groups = {k: list(v) for k, v in groups.items()}
        self.config = config
        self.step_count = 0
        seen = set()
        for params in self.groups.values():
            for p in params:
                if id(p) in seen:
                    raise ContractError("a parameter appears in more than one group")
                seen.add(id(p))
        if frozen is not None:
            assert_excludes_backbone(self.groups, frozen)
        self.m = {id(p): np.zeros_like(p.data, dtype=np.float64) for ps in self.groups.values() for p in ps}
        self.v = {id(p): np.zeros_like(p.data, dtype=np.float64) for ps in self.groups.values() for p in ps}

    def parameters(self) -> list[T.Tensor]:
        return [p for ps in self.groups.values() for p in ps]

    def step(self, grads: dict[int, np.ndarray] | None = None) -> None:
        """Apply one update from ``p.grad`` (or ``grads[id(p)]``); missing grads count as zero."""
        def g(p):
            if grads is not None:
                out = grads.get(id(p))
            else:
                out = p.grad
            return np.zeros_like(p.data, dtype=np.float64) if out is None else np.asarray(out, np.float64)

        all_grads = {id(p): g(p) for p in self.parameters()}
        bad = [i for i, a in all_grads.items() if not np.isfinite(a).all()]
        if bad:
            raise NumericError(f"non-finite gradient in {len(bad)} parameter tensor(s); step aborted")
        self.step_count += 1
        c = self.config
        for name, params in self.groups.items():
            lr, wd = c.group_hparams()[name]
            for p in params:
                new, self.m[id(p)], self.v[id(p)] = adamw_update(
                    p.data.astype(np.float64), all_grads[id(p)], self.m[id(p)], self.v[id(p)],
                    self.step_count, lr, wd, c.betas, c.eps)
                p.data = new.astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def optimizer_step(params_by_group: dict[str, list[np.ndarray]],
                   grads_by_group: dict[str, list[np.ndarray]], config: OptimizerConfig,
                   step: int, state: dict | None = None) -> tuple[dict[str, list[np.ndarray]], dict]:
    """Functional form: returns updated arrays and the moment state for the next call."""
    state = state or {}
    out = {}
    for name, params in params_by_group.items():
        lr, wd = config.group_hparams()[name]
        grads = grads_by_group[name]
        if any(not np.isfinite(g).all() for g in grads):
            raise NumericError(f"non-finite gradient in group {name!r}; step aborted")
        ms = state.get(("m", name)) or [np.zeros_like(p, dtype=np.float64) for p in params]
        vs = state.get(("v", name)) or [np.zeros_like(p, dtype=np.float64) for p in params]
        res = [adamw_update(p, g, m, v, step, lr, wd, config.betas, config.eps)
               for p, g, m, v in zip(params, grads, ms, vs)]
        out[name] = [r[0] for r in res]
        state[("m", name)] = [r[1] for r in res]
        state[("v", name)] = [r[2] for r in res]
    return out, state


def assert_excludes_backbone(groups: dict[str, list[T.Tensor]], weights: BackboneWeights) -> None:
    """Raise unless no optimised array shares memory with a backbone tensor."""
    for name, params in groups.items():
        for p in params:
            for bname, arr in weights.tensors.items():
                if np.shares_memory(p.data, arr):
                    raise ContractError(f"optimizer group {name!r} contains backbone tensor {bname!r}")


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = 0.5
    noise_prob: float = 0.25
    noise_std: tuple[float, float] = (0.0, 0.1)
    gamma_prob: float = 0.2
    gamma_range: tuple[float, float] = (0.7, 1.5)
    brightness_prob: float = 0.15
    brightness_range: tuple[float, float] = (0.75, 1.25)
    # listed for completeness; not implemented and must stay 0
    rotation_prob: float = 0.0
    zoom_prob: float = 0.0
    affine_prob: float = 0.0
    lowres_prob: float = 0.0
    contrast_prob: float = 0.0
    blur_prob: float = 0.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k.endswith("_prob") and not 0 <= v <= 1:
                raise ContractError(f"{k} must lie in [0, 1], got {v}")
        for k in ("rotation_prob", "zoom_prob", "affine_prob", "lowres_prob", "contrast_prob",
                  "blur_prob"):
            if getattr(self, k):
                raise NotImplementedError(f"{k.removesuffix('_prob')} augmentation is not implemented")

    @classmethod
    def off(cls) -> "AugmentPolicy":
        return cls(0.0, 0.0, gamma_prob=0.0, brightness_prob=0.0)


def augment_volume(data: np.ndarray, mask: np.ndarray | None, policy: AugmentPolicy,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
    """Augment a ``C×H×W×S`` array (and its ``H×W×S`` mask) with the same geometry."""
    x = np.asarray(data)
    m = None if mask is None else np.asarray(mask)
    for ax in range(3):
        if rng.random() < policy.flip_prob:
            x = np.flip(x, axis=ax + 1)
            if m is not None:
                m = np.flip(m, axis=ax)
    x = np.ascontiguousarray(x)
    if m is not None:
        m = np.ascontiguousarray(m)
    if rng.random() < policy.noise_prob:
        x = x + rng.normal(0.0, rng.uniform(*policy.noise_std), x.shape).astype(x.dtype)
    if rng.random() < policy.gamma_prob:
        g = rng.uniform(*policy.gamma_range)
        lo, hi = x.min(), x.max()
        rng_ = hi - lo
        if rng_ > 0:
            x = (((x - lo) / rng_) ** g * rng_ + lo).astype(x.dtype)
    if rng.random() < policy.brightness_prob:
        x = (x * rng.uniform(*policy.brightness_range)).astype(x.dtype)
    return x, m


# ---------------------------------------------------------------- training loop

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 2
    lambda_seg: float = 1.0
    focal: FocalLossConfig = field(default_factory=FocalLossConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    grad_accum: int = 1
    patience: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.epochs > self.optim.max_epochs:
            raise ContractError(f"epochs must lie in [1, {self.optim.max_epochs}]")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ContractError("batch size and gradient accumulation must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    cls_loss: float
    seg_loss: float
    val_auroc: float
    seconds: float

    def line(self) -> str:
        return (f"epoch {self.epoch:3d}  loss {self.loss:.5f}  cls {self.cls_loss:.5f}  "
                f"seg {self.seg_loss:.5f}  val_auroc {self.val_auroc:.4f}  {self.seconds:.1f}s")


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_auroc: float
    backbone_checksum: str


def _slices(sample_views, plugin) -> list[np.ndarray]:
    return [prepare_slices(v, axis=plugin.slice_axes[i]) for i, v in enumerate(sample_views)]


def predict_logits(samples: Sequence[Sample], plugin, weights: BackboneWeights,
                   batch_size: int = 4) -> np.ndarray:
    """Raw logits ``n×K`` for a list of samples (batched by equal geometry)."""
    out = np.zeros((len(samples), plugin.num_classes))
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = list(range(start, min(start + batch_size, len(samples))))
            groups: dict[tuple, list[int]] = {}
            for i in chunk:
                groups.setdefault(tuple(v.shape for v in samples[i].views), []).append(i)
            for idx in groups.values():
                batch = [_slices([v.data for v in samples[i].views], plugin) for i in idx]
                res = forward_batch(batch, plugin, weights)
                out[idx] = res.logits.data
    return out


def evaluate_auroc(samples: Sequence[Sample], plugin, weights: BackboneWeights) -> float:
    z = predict_logits(samples, plugin, weights)
    y = np.stack([s.label for s in samples])
    if plugin.label_mode == "multi-class":
        from scipy.special import softmax
        z = softmax(z, axis=1)
    aucs = [compute_auroc(z[:, c], y[:, c]) for c in range(z.shape[1])
            if 0 < y[:, c].sum() < len(y)]
    if not aucs:
        raise ContractError("validation split has a single class; AUROC undefined")
    return float(np.mean(aucs))


def train_plugin(plugin, weights: BackboneWeights, train_set: Sequence[Sample],
                 val_set: Sequence[Sample], config: TrainConfig = TrainConfig(),
                 on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train the plugin in place and restore its best-validation-AUROC state.

    Only plugin tensors are optimised; the backbone checksum is verified
    unchanged at the end.
    """
    if not train_set or not val_set:
        raise ContractError("need non-empty training and validation sets")
    checksum_before = weights.checksum()
    opt = AdamW(plugin.param_groups(), config.optim, frozen=weights)
    rng = make_rng(config.seed, plugin.task_id, "train")
    use_seg = plugin.decoder is not None and config.lambda_seg > 0
    history: list[EpochRecord] = []
    best_state, best_auc, best_epoch, stale = plugin.state(), -np.inf, 0, 0

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        # group by geometry so each batch shares S
        batches, pending = [], {}
        for i in order:
            key = tuple(v.shape for v in train_set[i].views)
            pending.setdefault(key, []).append(int(i))
            if len(pending[key]) == config.batch_size:
                batches.append(pending.pop(key))
        batches.extend(b for b in pending.values() if b)
        sums = np.zeros(3)
        opt.zero_grad()
        for bi, idx in enumerate(batches):
            batch, masks = [], []
            for i in idx:
                s = train_set[i]
                datas, mask = [], s.mask
                for j, v in enumerate(s.views):
                    d, mm = augment_volume(v.data, mask if j == 0 else None, config.augment, rng)
                    if j == 0:
                        mask = mm
                    datas.append(d)
                batch.append(_slices(datas, plugin))
                masks.append(mask)
            seg_idx = [k for k, m in enumerate(masks) if m is not None] if use_seg else []
            res = forward_batch(batch, plugin, weights, return_seg=seg_idx)
            y = np.stack([train_set[i].label for i in idx])
            cls = focal_loss(res.logits, y, config.focal, plugin.label_mode)
            segs = [seg_loss(res.seg_logits[n], masks[k], plugin.decoder.config.num_classes)
                    for n, k in enumerate(seg_idx)]
            loss = total_loss(cls, segs, config.lambda_seg if use_seg else 0.0)
            if config.grad_accum > 1:
                loss_b = T.scale(loss, 1.0 / config.grad_accum)
            else:
                loss_b = loss
            # accumulate into existing grads
            prev = {id(p): p.grad for p in opt.parameters()}
            T.backward(loss_b, wrt=opt.parameters())
            for p in opt.parameters():
                if prev[id(p)] is not None:
                    p.grad = p.grad + prev[id(p)]
            if (bi + 1) % config.grad_accum == 0 or bi == len(batches) - 1:
                opt.step()
                opt.zero_grad()
            sums += [float(loss.data) * len(idx), float(cls.data) * len(idx),
                     (float(np.mean([s.data for s in segs])) if segs else 0.0) * len(idx)]
        val_auc = evaluate_auroc(val_set, plugin, weights)
        n = len(train_set)
        rec = EpochRecord(epoch, sums[0] / n, sums[1] / n, sums[2] / n, val_auc,
                          time.perf_counter() - t0)
        history.append(rec)
        log.info(rec.line())
        if on_epoch is not None:
            on_epoch(rec)
        if val_auc > best_auc:
            best_state, best_auc, best_epoch, stale = plugin.state(), val_auc, epoch, 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                break
    plugin.load_state(best_state)
    checksum_after = weights.checksum()
    if checksum_after != checksum_before:
        raise ContractError("backbone weights changed during training")
    return TrainResult(history, best_epoch, float(best_auc), checksum_after)
