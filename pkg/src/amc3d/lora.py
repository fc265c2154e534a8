"""Low-rank adapters for frozen linear maps.

An adapter for a frozen ``W`` of shape ``d_in×d_out`` holds ``B`` (``d_in×r``)
and ``A`` (``r×d_out``) and contributes ``(alpha/r)·x·B·A`` to ``x·W``.  ``B``
starts at zero, so a fresh adapter leaves the frozen layer untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import ContractError
from .rng import make_rng, trunc_normal
from .tensor import Tensor, add, as_tensor, matmul, scale

DEFAULT_RANK = 8
DEFAULT_ALPHA = 16.0


@dataclass
class LoraAdapter:
    A: Tensor
    B: Tensor
    alpha: float
    target: str

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.B.shape[0]

    @property
    def d_out(self) -> int:
        return self.A.shape[1]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        """The dense update ``(alpha/r)·B·A``."""
        return self.scaling * (self.B.data @ self.A.data)

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]

    def num_parameters(self) -> int:
        return self.rank * (self.d_in + self.d_out)


def new_adapter(d_in: int, d_out: int, rank: int, alpha: float, target: str,
                rng: np.random.Generator) -> LoraAdapter:
    if rank < 1:
        raise ContractError(f"LoRA rank must be >= 1, got {rank}")
    if alpha <= 0:
        raise ContractError(f"LoRA alpha must be positive, got {alpha}")
    if rank > min(d_in, d_out):
        raise ContractError(f"LoRA rank {rank} exceeds min(d_in, d_out)={min(d_in, d_out)} "
                            f"for {target}")
    A = Tensor(trunc_normal(rng, (rank, d_out), std=0.02), requires_grad=True,
               name=f"{target}.lora_A")
    B = Tensor(np.zeros((d_in, rank)), requires_grad=True, name=f"{target}.lora_B")
    return LoraAdapter(A, B, float(alpha), target)


@dataclass
class LoraAdapterSet:
    """One adapter per adapted layer of a backbone, keyed by layer id."""

    adapters: dict[str, LoraAdapter] = field(default_factory=dict)

    def __getitem__(self, target: str) -> LoraAdapter:
        return self.adapters[target]

    def get(self, target: str) -> LoraAdapter | None:
        return self.adapters.get(target)

    def __iter__(self) -> Iterator[str]:
        return iter(self.adapters)

    def __len__(self) -> int:
        return len(self.adapters)

    def parameters(self) -> list[Tensor]:
        return [p for a in self.adapters.values() for p in a.parameters()]

    def num_parameters(self) -> int:
        return sum(a.num_parameters() for a in self.adapters.values())

    def validate(self, config) -> None:
        shapes = config.linear_shapes()
        unknown = set(self.adapters) - set(shapes)
        if unknown:
            raise ContractError(f"adapters target layers that do not exist: {sorted(unknown)}")
        missing = set(shapes) - set(self.adapters)
        if missing:
            raise ContractError(f"adapter set is missing targets: {sorted(missing)}")
        for name, a in self.adapters.items():
            if (a.d_in, a.d_out) != shapes[name]:
                raise ContractError(f"adapter {name} is {a.d_in}×{a.d_out}, layer is "
                                    f"{shapes[name][0]}×{shapes[name][1]}")


def init_adapter_set(config, r: int = DEFAULT_RANK, alpha: float = DEFAULT_ALPHA,
                     seed: int = 0, stream: str = "lora") -> LoraAdapterSet:
    """Adapters for the patch embedding and every attention q/k/v/out projection."""
    rng = make_rng(seed, stream)
    return LoraAdapterSet({name: new_adapter(d_in, d_out, r, alpha, name, rng)
                           for name, (d_in, d_out) in config.linear_shapes().items()})


def apply_adapted(x, W, adapter: LoraAdapter | None) -> Tensor:
    """``x·W + (alpha/r)·(x·B)·A`` without forming the dense update."""
    x, W = as_tensor(x), as_tensor(W)
    base = matmul(x, W)
    if adapter is None:
        return base
    if W.shape != (adapter.d_in, adapter.d_out):
        raise ContractError(f"adapter {adapter.target} is {adapter.d_in}×{adapter.d_out}, "
                            f"weight is {W.shape}")
    return add(base, scale(matmul(matmul(x, adapter.B), adapter.A), adapter.scaling))


def merge_adapter(W, adapter: LoraAdapter) -> np.ndarray:
    W = np.asarray(W.data if isinstance(W, Tensor) else W)
    if W.shape != (adapter.d_in, adapter.d_out):
        raise ContractError(f"adapter {adapter.target} is {adapter.d_in}×{adapter.d_out}, "
                            f"weight is {W.shape}")
    if not adapter.B.data.any():
        return W.copy()
    return W + adapter.delta().astype(W.dtype)


def count_trainable(adapter_sets, queries: Iterable, head, decoder=None) -> int:
    """Exact number of trainable scalars in a task plugin.

    ``adapter_sets`` may be a single set or one per view; ``queries`` are the
    distinct stored query vectors; ``head`` and ``decoder`` expose
    ``parameters()``.
    """
    if isinstance(adapter_sets, LoraAdapterSet):
        adapter_sets = [adapter_sets]
    total = sum(s.num_parameters() for s in adapter_sets)
    total += sum(int(np.size(q.data if isinstance(q, Tensor) else q)) for q in queries)
    total += sum(p.size for p in head.parameters())
    if decoder is not None:
        total += sum(p.size for p in decoder.parameters())
    return int(total)
