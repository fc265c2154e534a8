"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array.  Every primitive in this module
computes its output eagerly and, when any input requires a gradient, attaches
a :class:`TapeNode` holding the inputs and a closure that maps the output
gradient to input gradients.  :func:`backward` walks the resulting DAG once in
reverse topological order.

Precision is global (``f32`` by default, ``f64`` for verification) and can be
switched with :func:`set_precision` or the :func:`precision` context manager.
"""
from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, NumericError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = {
    "dtype": _DTYPES[os.environ.get("AMC_PRECISION", "f32")],
    "grad_enabled": True,
    "check_finite": True,
}


def get_dtype():
    return _state["dtype"]


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ContractError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str):
    old = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording tape nodes."""
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


class TapeNode:
    __slots__ = ("kind", "inputs", "backward_fn")

    def __init__(self, kind: str, inputs: tuple["Tensor", ...], backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"TapeNode({self.kind}, n_inputs={len(self.inputs)})"


class Tensor:
    """An n-dimensional array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_state["dtype"])
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if _state["check_finite"] and not np.isfinite(out).all():
        raise NumericError(f"{kind}: non-finite values in output")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t.node = None
    t.requires_grad = False
    if _state["grad_enabled"] and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t.node = TapeNode(kind, tuple(inputs), backward_fn)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(kind, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _record("mul", ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _record("div", out, (a, b), back)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.dtype.type(c)
    return _record("scale", x.data * c, (x,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ContractError("matmul: scalars are not allowed")
    ka = a.shape[-1]
    kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if ka != kb:
        raise ContractError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError:
        raise ContractError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}") from None

    def back(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if a.requires_grad:
            ga = g2 @ np.swapaxes(b2, -1, -2)
            if ad.ndim == 1:
                ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
            ga = _unbroadcast(ga, ad.shape)
        if b.requires_grad:
            if b2.ndim == 2 and a2.ndim > 2:
                gb = a2.reshape(-1, a2.shape[-1]).T @ g2.reshape(-1, g2.shape[-1])
            else:
                gb = np.swapaxes(a2, -1, -2) @ g2
            if bd.ndim == 1:
                gb = gb[..., 0]
            gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return _record("matmul", out, (a, b), back)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(out), (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    axes = range(x.ndim) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    n = int(np.prod([shape[a] for a in axes]))
    out = x.data.mean(axis=axis, keepdims=keepdims)
    inv = x.dtype.type(1.0 / n)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, shape).copy(),)

    return _record("mean", np.asarray(out, dtype=x.dtype), (x,), back)


# ---------------------------------------------------------------- elementwise

def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if (xd <= 0).any():
        raise NumericError("log: non-positive input")
    return _record("log", np.log(xd), (x,), lambda g: (g / xd,))


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    p = float(p)
    if p == 0.0:
        return _record("power", np.ones_like(xd), (x,), lambda g: (np.zeros_like(g),))
    out = xd ** x.dtype.type(p)

    def back(g):
        if p == 1.0:
            return (g,)
        return (g * x.dtype.type(p) * xd ** x.dtype.type(p - 1.0),)

    return _record("power", out, (x,), back)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def log_sigmoid(x) -> Tensor:
    """``log σ(x)`` computed without overflow for large ``|x|``."""
    x = as_tensor(x)
    xd = x.data
    out = -np.logaddexp(0, -xd)
    return _record("log-sigmoid", out, (x,), lambda g: (g * expit(-xd),))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x) -> Tensor:
    """GELU in its tanh form."""
    x = as_tensor(x)
    xd = x.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    t = np.tanh(c * (xd + k * xd * xd * xd))
    out = 0.5 * xd * (1 + t)

    def back(g):
        dt = (1 - t * t) * c * (1 + 3 * k * xd * xd)
        return (g * (0.5 * (1 + t) + 0.5 * xd * dt),)

    return _record("gelu", out, (x,), back)


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    s = x.dtype.type(slope)
    pos = xd > 0
    out = np.where(pos, xd, s * xd)
    return _record("leaky-relu", out, (x,), lambda g: (np.where(pos, g, s * g),))


# ---------------------------------------------------------------- reductions / normalisation

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (x,), back)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record("log-softmax", out, (x,), back)


def normalize(x, axes, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance standardisation over ``axes`` (no affine part)."""
    x = as_tensor(x)
    axes = tuple(a % x.ndim for a in (axes if isinstance(axes, (tuple, list)) else (axes,)))
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    out = xc * rstd

    def back(g):
        gm = g.mean(axis=axes, keepdims=True)
        gy = (g * out).mean(axis=axes, keepdims=True)
        return (rstd * (g - gm - out * gy),)

    return _record("normalize", out, (x,), back)


def layer_norm(x, weight, bias, eps: float = 1e-6) -> Tensor:
    return add(mul(normalize(x, -1, eps), weight), bias)


def instance_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel standardisation of a ``(B, C, *spatial)`` tensor."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ContractError(f"instance_norm: expected (B, C, *spatial), got {x.shape}")
    y = normalize(x, tuple(range(2, x.ndim)), eps)
    extra = (1,) * (x.ndim - 2)
    if weight is not None:
        y = mul(y, reshape(weight, (-1,) + extra))
    if bias is not None:
        y = add(y, reshape(bias, (-1,) + extra))
    return y


# ---------------------------------------------------------------- shape manipulation

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ContractError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ContractError("concat: empty input list")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ContractError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, xs, back)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    return concat([reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) if axis >= 0 else
                   reshape(x, x.shape[:x.ndim + axis + 1] + (1,) + x.shape[x.ndim + axis + 1:])
                   for x in xs], axis=axis)


def take(x, indices, axis: int = 0) -> Tensor:
    """Select entries ``indices`` along ``axis`` (slice-select)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ContractError(f"take: index out of range for axis {axis} of size {n}")
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (slice(None),) * (axis % len(shape)) + (idx,), g)
        return (gx,)

    return _record("slice-select", np.take(x.data, idx, axis=axis), (x,), back)


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    keys = key if isinstance(key, tuple) else (key,)
    advanced = any(isinstance(k, (list, np.ndarray)) for k in keys)
    out = x.data[key]

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        if advanced:
            np.add.at(gx, key, g)
        else:
            gx[key] = g
        return (gx,)

    return _record("getitem", np.asarray(out), (x,), back)


# ---------------------------------------------------------------- volumetric

def conv3d(x, w, b=None) -> Tensor:
    """Stride-1, zero-padded ("same") 3D convolution.

    ``x`` is ``(B, Cin, D1, D2, D3)``, ``w`` is ``(Cout, Cin, k1, k2, k3)`` with odd
    kernel extents.  Computed directly as a sum over kernel offsets.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5:
        raise ContractError(f"conv3d: expected 5-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ContractError(f"conv3d: input channels {x.shape} do not match weight {w.shape}")
    ks = w.shape[2:]
    if any(k % 2 == 0 for k in ks):
        raise ContractError(f"conv3d: kernel extents must be odd, got {ks}")
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ContractError(f"conv3d: bias shape {b.shape} != ({w.shape[0]},)")
        inputs.append(b)
    B, _, D1, D2, D3 = x.shape
    pads = [k // 2 for k in ks]
    xd = x.data
    xp = np.pad(xd, [(0, 0), (0, 0)] + [(p, p) for p in pads]) if any(pads) else xd
    wd = w.data
    offsets = [(i, j, l) for i in range(ks[0]) for j in range(ks[1]) for l in range(ks[2])]

    def window(arr, o):
        return arr[:, :, o[0]:o[0] + D1, o[1]:o[1] + D2, o[2]:o[2] + D3]

    out = np.zeros((B, w.shape[0], D1, D2, D3), dtype=xd.dtype)
    for o in offsets:
        out += np.moveaxis(np.tensordot(wd[:, :, o[0], o[1], o[2]], window(xp, o), axes=([1], [1])), 0, 1)
    if b is not None:
        out += b.data.reshape(1, -1, 1, 1, 1)

    def back(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for o in offsets:
                window(gxp, o)[...] += np.moveaxis(
                    np.tensordot(wd[:, :, o[0], o[1], o[2]], g, axes=([0], [1])), 0, 1)
            gx = gxp[:, :, pads[0]:pads[0] + D1, pads[1]:pads[1] + D2, pads[2]:pads[2] + D3]
        if w.requires_grad:
            gw = np.zeros_like(wd)
            gflat = g.transpose(1, 0, 2, 3, 4).reshape(g.shape[1], -1)
            for o in offsets:
                xs = window(xp, o).transpose(1, 0, 2, 3, 4).reshape(xd.shape[1], -1)
                gw[:, :, o[0], o[1], o[2]] = gflat @ xs.T
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw, gb) if b is not None else (gx, gw)

    return _record("conv3d", out, inputs, back)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear-interpolation matrix mapping ``n_in`` samples to ``n_out`` (half-pixel centres)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - w1)
    np.add.at(m, (rows, i1), w1)
    return m


def resize_linear(arr: np.ndarray, size: Sequence[int]) -> np.ndarray:
    """Separable linear resize of the trailing ``len(size)`` axes of a numpy array."""
    out = arr
    first = arr.ndim - len(size)
    for k, n in enumerate(size):
        ax = first + k
        if out.shape[ax] == n:
            continue
        m = interp_matrix(out.shape[ax], n, dtype=out.dtype)
        out = np.moveaxis(np.tensordot(m, out, axes=([1], [ax])), 0, ax)
    return out


def upsample_linear(x, size: Sequence[int]) -> Tensor:
    """Trilinear (or n-linear) upsampling of the trailing axes to ``size``."""
    x = as_tensor(x)
    size = tuple(int(s) for s in size)
    if len(size) > x.ndim:
        raise ContractError(f"upsample: target {size} has more axes than input {x.shape}")
    first = x.ndim - len(size)
    mats = [interp_matrix(x.shape[first + k], n, dtype=x.dtype) for k, n in enumerate(size)]
    out = x.data
    for k, m in enumerate(mats):
        if m.shape[0] != m.shape[1]:
            out = np.moveaxis(np.tensordot(m, out, axes=([1], [first + k])), 0, first + k)

    def back(g):
        for k, m in enumerate(mats):
            if m.shape[0] != m.shape[1]:
                g = np.moveaxis(np.tensordot(m.T, g, axes=([1], [first + k])), 0, first + k)
        return (g,)

    return _record("trilinear-upsample", np.ascontiguousarray(out), (x,), back)


# ---------------------------------------------------------------- dispatch

PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "softmax": softmax,
    "log-softmax": log_softmax,
    "layer-norm": layer_norm,
    "normalize": normalize,
    "gelu": gelu,
    "leaky-relu": leaky_relu,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "slice-select": take,
    "mean": mean,
    "sum": sum_,
    "conv3d": conv3d,
    "trilinear-upsample": upsample_linear,
    "sigmoid": sigmoid,
    "log-sigmoid": log_sigmoid,
    "log": log,
    "exp": exp,
    "power": power,
}


def forward_primitive(kind: str, *inputs, **attrs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Differentiate a scalar ``loss``.

    Every reachable leaf with ``requires_grad`` gets ``.grad`` set to the
    gradient.  When ``wrt`` is given, gradients for those tensors (leaves or
    intermediates) are also returned, zero-filled for tensors the loss does
    not depend on.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    wrt = list(wrt) if wrt is not None else None
    keep = {id(t) for t in wrt} if wrt else set()
    if wrt:
        for t in wrt:
            if t.is_leaf and t.requires_grad:
                t.grad = np.zeros_like(t.data)
    if not loss.requires_grad:
        return [np.zeros_like(t.data) for t in wrt] if wrt is not None else None

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    kept: dict[int, np.ndarray] = {}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if id(t) in keep:
            kept[id(t)] = g
        if t.node is None:
            t.grad = g
            continue
        in_grads = t.node.backward_fn(g)
        for inp, ig in zip(t.node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = ig if prev is None else prev + ig
    if wrt is None:
        return None
    return [kept.get(id(t), np.zeros_like(t.data)) for t in wrt]


# ---------------------------------------------------------------- verification

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    passed: bool
    tolerance: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)


def finite_difference_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5,
                            tolerance: float = 1e-5, indices: Sequence[int] | None = None,
                            floor: float = 1e-3) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``point`` with central differences.

    Coordinate errors are ``|a - n| / max(|a|, |n|, floor * max|n|)``; the floor
    keeps coordinates whose true gradient is essentially zero from dominating.
    ``indices`` restricts the comparison to a subset of flat coordinates.
    """
    if step <= 0:
        raise ContractError("finite_difference_check: step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=get_dtype())
    x = Tensor(base.copy(), requires_grad=True)
    y = f(x)
    if y.size != 1:
        raise ContractError(f"finite_difference_check: f must be scalar-valued, got {y.shape}")
    backward(y)
    analytic_full = x.grad if x.grad is not None else np.zeros_like(base)
    idx = np.arange(base.size) if indices is None else np.asarray(indices)
    flat = base.reshape(-1)
    numeric = np.empty(idx.size)
    with no_grad():
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(Tensor(base)).item()
            flat[i] = orig - step
            fm = f(Tensor(base)).item()
            flat[i] = orig
            numeric[n] = (fp - fm) / (2 * step)
    analytic = analytic_full.reshape(-1)[idx].astype(np.float64)
    diff = np.abs(analytic - numeric)
    scale_ = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(floor * scale_, 1e-300))
    rel = diff / denom
    max_rel = float(rel.max(initial=0.0))
    return GradCheckReport(max_rel, float(diff.max(initial=0.0)), max_rel < tolerance,
                           tolerance, analytic, numeric, idx)
