"""Task plugins: the complete trainable bundle for one task over a shared frozen backbone.

Plugin file layout (little-endian)::

    b"AMCP"  version u32
    manifest length u32, manifest JSON (utf-8)
    tensor container (see :mod:`amc3d.container`) holding exactly the
    trainable tensors
"""
from __future__ import annotations

import io
import json
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .auxseg import SegDecoder, SegDecoderConfig, default_decoder_config, init_decoder
from .backbone import BackboneWeights
from .calibration import PlattParams, apply_calibration, calibrated_logits
from .container import read_tensors, write_tensors
from .errors import ContractError, FingerprintError, FormatError
from .fusion import ClassifierHead, ForwardResult, classify_volume, new_head
from .lora import (DEFAULT_ALPHA, DEFAULT_RANK, LoraAdapter, LoraAdapterSet, count_trainable,
                   init_adapter_set)
from .rng import make_rng, trunc_normal
from .volume import Volume

MAGIC = b"AMCP"
VERSION = 1
LABEL_MODES = ("multi-label", "multi-class")


@dataclass
class TaskPlugin:
    task_id: str
    adapters: list[LoraAdapterSet]
    view_queries: list[T.Tensor]
    task_query: T.Tensor
    head: ClassifierHead
    decoder: SegDecoder | None = None
    platt: PlattParams | None = None
    backbone_fingerprint: str = ""
    slice_axes: list[int] = field(default_factory=lambda: [2])
    label_mode: str = "multi-label"
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        V = len(self.adapters)
        if V < 1:
            raise ContractError("a plugin needs at least one view")
        if len(self.view_queries) != V or len(self.slice_axes) != V:
            raise ContractError(f"{V} adapter sets but {len(self.view_queries)} view queries and "
                                f"{len(self.slice_axes)} slice axes")
        if V == 1 and self.view_queries[0] is not self.task_query:
            raise ContractError("a single-view plugin stores one query for slices and task")
        if self.label_mode not in LABEL_MODES:
            raise ContractError(f"label mode must be one of {LABEL_MODES}")
        if not self.class_names:
            self.class_names = [f"class{i}" for i in range(self.head.num_classes)]
        if len(self.class_names) != self.head.num_classes:
            raise ContractError(f"{len(self.class_names)} class names for "
                                f"{self.head.num_classes} classes")

    @property
    def num_views(self) -> int:
        return len(self.adapters)

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def queries(self) -> list[T.Tensor]:
        """Distinct stored query vectors."""
        if self.num_views == 1:
            return [self.task_query]
        return list(self.view_queries) + [self.task_query]

    def named_tensors(self) -> dict[str, T.Tensor]:
        out: dict[str, T.Tensor] = {}
        for i, aset in enumerate(self.adapters):
            for target, ad in aset.adapters.items():
                out[f"view{i}.{target}.lora_A"] = ad.A
                out[f"view{i}.{target}.lora_B"] = ad.B
        if self.num_views > 1:
            for i, q in enumerate(self.view_queries):
                out[f"view{i}.query"] = q
        out["task_query"] = self.task_query
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        if self.decoder is not None:
            for name, p in self.decoder.params.items():
                out[f"decoder.{name}"] = p
        return out

    def parameters(self) -> list[T.Tensor]:
        return list(self.named_tensors().values())

    def param_groups(self) -> dict[str, list[T.Tensor]]:
        """``lora`` (adapter factors) and ``head`` (queries, head, decoder)."""
        lora = [p for s in self.adapters for p in s.parameters()]
        head = self.queries() + self.head.parameters()
        if self.decoder is not None:
            head += self.decoder.parameters()
        return {"lora": lora, "head": head}

    def num_trainable(self) -> int:
        return count_trainable(self.adapters, self.queries(), self.head, self.decoder)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_tensors().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_tensors()
        if set(state) != set(named):
            raise ContractError("plugin state does not match the plugin's tensors")
        for k, t in named.items():
            if state[k].shape != t.shape:
                raise ContractError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data = state[k].astype(t.data.dtype, copy=True)

    def calibrate(self, logits) -> np.ndarray:
        """Calibrated probabilities (plain activation when no calibration is fitted)."""
        z = np.asarray(logits, dtype=np.float64)
        if self.platt is not None:
            return apply_calibration(z, self.platt)
        return self.head.probabilities(z)

    def calibrated_logits(self, logits) -> np.ndarray:
        z = np.asarray(logits, dtype=np.float64)
        return calibrated_logits(z, self.platt) if self.platt is not None else z


def new_plugin(weights: BackboneWeights, num_classes: int = 1, views: int = 1,
               rank: int = DEFAULT_RANK, alpha: float = DEFAULT_ALPHA, seed: int = 0,
               decoder: bool | SegDecoderConfig = False, seg_classes: int = 2,
               label_mode: str = "multi-label", task_id: str = "task",
               slice_axes: Sequence[int] | None = None,
               class_names: Sequence[str] | None = None) -> TaskPlugin:
    cfg = weights.config
    d = cfg.embed_dim
    rng = make_rng(seed, task_id, "queries")
    adapters = [init_adapter_set(cfg, rank, alpha, seed, f"{task_id}/lora/{i}") for i in range(views)]
    q_t = T.Tensor(trunc_normal(rng, (d,), std=0.02), requires_grad=True)
    if views == 1:
        view_queries = [q_t]
    else:
        view_queries = [T.Tensor(trunc_normal(rng, (d,), std=0.02), requires_grad=True)
                        for _ in range(views)]
    activation = "softmax" if label_mode == "multi-class" else "sigmoid"
    head = new_head(d, num_classes, activation, seed, f"{task_id}/head")
    dec = None
    if decoder:
        dcfg = decoder if isinstance(decoder, SegDecoderConfig) else \
            default_decoder_config(cfg, seg_classes)
        dec = init_decoder(dcfg, seed, stream=f"{task_id}/decoder")
    return TaskPlugin(task_id, adapters, view_queries, q_t, head, dec, None,
                      weights.fingerprint(), list(slice_axes) if slice_axes else [2] * views,
                      label_mode, list(class_names) if class_names else [])


# ---------------------------------------------------------------- serialisation

def _manifest(plugin: TaskPlugin) -> dict:
    dec = plugin.decoder
    return {
        "format": "amc-plugin",
        "task_id": plugin.task_id,
        "views": plugin.num_views,
        "slice_axes": plugin.slice_axes,
        "label_mode": plugin.label_mode,
        "class_names": plugin.class_names,
        "activation": plugin.head.activation,
        "lora": [{t: {"rank": a.rank, "alpha": a.alpha} for t, a in s.adapters.items()}
                 for s in plugin.adapters],
        "decoder": None if dec is None else {
            "in_channels": dec.config.in_channels, "channels": list(dec.config.channels),
            "upsample": [list(u) for u in dec.config.upsample],
            "num_classes": dec.config.num_classes, "kernel": dec.config.kernel},
        "platt": None if plugin.platt is None else plugin.platt.to_dict(),
        "backbone_fingerprint": plugin.backbone_fingerprint,
        "num_trainable": plugin.num_trainable(),
    }


def plugin_to_bytes(plugin: TaskPlugin) -> bytes:
    manifest = json.dumps(_manifest(plugin)).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(manifest)))
    buf.write(manifest)
    write_tensors(buf, {k: v.data for k, v in plugin.named_tensors().items()})
    return buf.getvalue()


def save_plugin(path, plugin: TaskPlugin) -> None:
    Path(path).write_bytes(plugin_to_bytes(plugin))


def plugin_from_bytes(raw: bytes, backbone: BackboneWeights | None = None) -> TaskPlugin:
    if raw[:4] != MAGIC:
        raise FormatError(f"not a plugin file (magic {raw[:4]!r})")
    try:
        version, n = struct.unpack_from("<II", raw, 4)
        man = json.loads(raw[12:12 + n].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt plugin manifest ({exc})") from None
    if version != VERSION:
        raise FormatError(f"unsupported plugin version {version}")
    tensors = read_tensors(io.BytesIO(raw[12 + n:]))
    if backbone is not None:
        check_fingerprint(man["backbone_fingerprint"], backbone.fingerprint())

    def take(name):
        try:
            return T.Tensor(tensors.pop(name), requires_grad=True)
        except KeyError:
            raise FormatError(f"plugin file is missing tensor {name!r}") from None

    adapters = []
    for i, spec in enumerate(man["lora"]):
        adapters.append(LoraAdapterSet({
            t: LoraAdapter(take(f"view{i}.{t}.lora_A"), take(f"view{i}.{t}.lora_B"),
                           float(s["alpha"]), t) for t, s in spec.items()}))
    q_t = take("task_query")
    if man["views"] == 1:
        view_queries = [q_t]
    else:
        view_queries = [take(f"view{i}.query") for i in range(man["views"])]
    head = ClassifierHead(take("head.weight"), take("head.bias"), man["activation"])
    dec = None
    if man["decoder"] is not None:
        dcfg = SegDecoderConfig(**man["decoder"])
        dec = SegDecoder(dcfg, {k[len("decoder."):]: take(k) for k in list(tensors)
                                if k.startswith("decoder.")})
    if tensors:
        raise FormatError(f"unexpected tensors in plugin file: {sorted(tensors)}")
    platt = PlattParams.from_dict(man["platt"]) if man["platt"] else None
    return TaskPlugin(man["task_id"], adapters, view_queries, q_t, head, dec, platt,
                      man["backbone_fingerprint"], man["slice_axes"], man["label_mode"],
                      man["class_names"])


def load_plugin(path, backbone: BackboneWeights | None = None) -> TaskPlugin:
    """Load a plugin; with ``backbone`` given, refuse a fingerprint mismatch."""
    return plugin_from_bytes(Path(path).read_bytes(), backbone)


def check_fingerprint(expected: str, actual: str) -> None:
    if expected != actual:
        raise FingerprintError(f"plugin was trained on backbone {expected}, "
                               f"loaded backbone is {actual}")


# ---------------------------------------------------------------- engine

class Engine:
    """One loaded backbone serving whichever plugin is currently swapped in.

    Inference calls may run concurrently; :meth:`swap_plugin` waits for them
    to finish and blocks new ones while it runs.
    """

    def __init__(self, weights: BackboneWeights, plugin: TaskPlugin | None = None):
        self.weights = weights
        self.fingerprint = weights.fingerprint()
        self.plugin: TaskPlugin | None = None
        self._cond = threading.Condition()
        self._readers = 0
        if plugin is not None:
            self.swap_plugin(plugin)

    def swap_plugin(self, plugin: TaskPlugin) -> "Engine":
        check_fingerprint(plugin.backbone_fingerprint, self.fingerprint)
        with self._cond:
            self._cond.wait_for(lambda: self._readers == 0)
            self.plugin = plugin
        return self

    def classify(self, views: Sequence[Volume], retain_attention: bool = False) -> ForwardResult:
        with self._cond:
            if self.plugin is None:
                raise ContractError("no plugin loaded")
            plugin = self.plugin
            self._readers += 1
        try:
            with T.no_grad():
                return classify_volume(views, plugin, self.weights, retain_attention,
                                       check=False)
        finally:
            with self._cond:
                self._readers -= 1
                self._cond.notify_all()

    def logits(self, views: Sequence[Volume]) -> np.ndarray:
        return self.classify(views).logits.data[0]
