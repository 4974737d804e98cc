"""Reverse-mode automatic differentiation over float64 numpy arrays, plus Adam.

Every op records its inputs and a backward closure. ``backward`` visits the
reachable nodes once each in reverse creation order. Forward results are checked
for NaN/Inf so numeric blow-ups surface at the op that caused them.
"""

from __future__ import annotations

import contextlib
import itertools
import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_ids = itertools.count()
_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Backward called on something that is not a scalar on the tape."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check(op: str, out: np.ndarray) -> np.ndarray:
    # One reduction instead of a boolean temporary: NaN/Inf always poison the sum.
    with np.errstate(invalid="ignore", over="ignore"):
        total = np.add.reduce(out, axis=None)
    if not np.isfinite(total):
        raise NonFiniteError(f"non-finite value produced by {op}")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_ids)

    # -- tape plumbing ---------------------------------------------------------

    @staticmethod
    def _make(op: str, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor(_check(op, data))
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        # Gradients may alias arrays held elsewhere, so they are never updated in place.
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        backward(self)

    # -- conveniences ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise TapeError("backward needs a scalar Tensor")
    if not loss.requires_grad:
        raise TapeError("loss is not on the tape (no input requires gradients)")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    order = sorted(nodes, reverse=True)
    interior = [nodes[k] for k in order if nodes[k]._backward is not None]
    for t in interior:
        t.grad = None
    loss.grad = np.ones_like(loss.data)
    for k in order:
        t = nodes[k]
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
    for t in interior:
        t.grad = None


# -- binary elementwise ops -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._make("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return Tensor._make("div", out, (a, b), bw)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data**p

    def bw(g):
        a._accumulate(g * p * a.data ** (p - 1))

    return Tensor._make("pow", out, (a,), bw)


def matmul(a, b) -> Tensor:
    """Batched matmul with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return Tensor._make("matmul", out, (a, b), bw)


# -- unary elementwise ops ----------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bw(g):
        a._accumulate(g * (a.data > 0))  # derivative at exactly 0 is taken as 0

    return Tensor._make("relu", out, (a,), bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        a._accumulate(g * (1.0 - out**2))

    return Tensor._make("tanh", out, (a,), bw)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)

    def bw(g):
        a._accumulate(g * out * (1.0 - out))

    return Tensor._make("sigmoid", out, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bw(g):
        a._accumulate(g * out)

    return Tensor._make("exp", out, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bw(g):
        a._accumulate(g / a.data)

    return Tensor._make("log", out, (a,), bw)


def softplus(a) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def bw(g):
        a._accumulate(g * _stable_sigmoid(a.data))

    return Tensor._make("softplus", out, (a,), bw)


# -- reductions and shape ops -------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return Tensor._make("sum", out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[k] for k in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def logsumexp(a, axis: int, keepdims: bool = False) -> Tensor:
    """Max-subtracted log-sum-exp along ``axis``."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = shifted / s

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(g * soft)

    return Tensor._make("logsumexp", out if keepdims else np.squeeze(out, axis), (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g):
        a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return Tensor._make("log_softmax", out, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor._make("reshape", a.data.reshape(shape), (a,), bw)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        a._accumulate(np.transpose(g, inv))

    return Tensor._make("transpose", np.transpose(a.data, axes), (a,), bw)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return Tensor._make("broadcast", np.broadcast_to(a.data, shape).copy(), (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat needs at least one tensor")
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._make("concat", out, ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis=axis)


def getitem(a, idx) -> Tensor:
    """Basic or advanced indexing; repeated advanced indices accumulate."""
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        if _is_basic_index(idx):
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        a._accumulate(full)

    return Tensor._make("getitem", np.array(out, copy=True), (a,), bw)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, np.integer)) or p is None or p is Ellipsis for p in parts)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis``; indices may repeat."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    if indices.ndim != 1:
        raise ValueError("take expects a 1-D index array")
    out = np.take(a.data, indices, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        g_moved = np.moveaxis(g, axis, 0)
        for r, s in enumerate(indices):
            moved[s] += g_moved[r]
        a._accumulate(full)

    return Tensor._make("take", out, (a,), bw)


def segment_sum(a, segment_ids, n_segments: int) -> Tensor:
    """Sum rows of ``a`` (axis 0) into ``n_segments`` buckets.

    Rows are added in index order, so the floating-point result for a bucket
    depends only on the rows that land in it.
    """
    a = as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.intp)
    if seg.shape != (a.shape[0],):
        raise ValueError("segment_ids must label every row of the input")
    out = np.zeros((n_segments,) + a.shape[1:])
    for r, s in enumerate(seg):
        out[s] += a.data[r]

    def bw(g):
        a._accumulate(g[seg])

    return Tensor._make("segment_sum", out, (a,), bw)


# -- parameters, modules, optimizer ------------------------------------------------


class Parameter(Tensor):
    __slots__ = ("m", "v")

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = None


def glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)) over the last two dims."""
    fan_in, fan_out = shape[-2], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Registers Parameters and sub-Modules assigned as attributes."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for k, v in enumerate(value):
                self._children[f"{name}.{k}"] = v
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.copy()


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 0.005, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            p.m = self.beta1 * p.m + (1.0 - self.beta1) * g
            p.v = self.beta2 * p.v + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (p.m / c1) / (np.sqrt(p.v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# -- checkpoint container ------------------------------------------------------------

MAGIC = b"VACKPT01"


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Little-endian float64 blobs preceded by a JSON index of (name, shape, offset)."""
    index, offset = [], 0
    blobs = []
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"tensors": index, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + n])
    body = np.frombuffer(raw[16 + n :], dtype="<f8")
    state = {}
    for entry in header["tensors"]:
        lo = entry["offset"]
        state[entry["name"]] = body[lo : lo + entry["count"]].astype(np.float64).reshape(entry["shape"])
    return state, header["meta"]
