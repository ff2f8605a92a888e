"""Reverse-mode automatic differentiation over numpy arrays, plus Adam.

The computation graphs in this package are small (a few dozen nodes) but run
on large arrays, so the engine records a fresh tape per evaluation and leaves
all heavy lifting to vectorized numpy ops.  Supported primitives: arithmetic
with broadcasting, matmul, exp/log/pow, sigmoid, leaky ReLU, axis max with
pass-through argmax (ties to the lowest index), axis sum/mean, stable softmax,
reshape, concatenation, and row gathering.

Conventions fixed here for reproducibility:
  * weight init is uniform in +-sqrt(6/(fan_in+fan_out)), biases zero;
  * leaky ReLU negative slope defaults to 0.01;
  * Adam uses beta1=0.9, beta2=0.999, eps=1e-8 with bias correction;
  * all random draws go through numpy's Philox counter-based generator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "GraphError",
    "Tensor",
    "ParamVector",
    "AdamState",
    "adam_step",
    "backward",
    "grad",
    "value_and_grad",
    "init_mlp_params",
    "mlp_forward",
    "mlp_apply",
    "LEAKY_SLOPE",
]

LEAKY_SLOPE = 0.01


class GraphError(TypeError):
    """An unsupported object or primitive entered the computation graph."""


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """A node in the reverse-mode tape wrapping an ndarray."""

    __slots__ = ("data", "grad", "parents", "vjp")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the reflected Tensor op

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data)
        if self.data.dtype == object:
            raise GraphError("object arrays cannot enter the graph")
        self.grad = None
        self.parents = parents
        self.vjp = vjp  # callable(out_grad) -> tuple of parent gradients

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis, keepdims=False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (np.ndarray, float, int, np.floating, np.integer)):
        return Tensor(np.asarray(x))
    raise GraphError(f"cannot lift {type(x).__name__} into the graph")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, (a, b))
    out.vjp = lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data, (a,))
    out.vjp = lambda g: (-g,)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, (a, b))
    out.vjp = lambda g: (
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape),
    )
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data, (a, b))
    out.vjp = lambda g: (
        _unbroadcast(g / b.data, a.data.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
    )
    return out


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data**p, (a,))
    out.vjp = lambda g: (g * p * a.data ** (p - 1),)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    val = np.exp(a.data)
    out = Tensor(val, (a,))
    out.vjp = lambda g: (g * val,)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data), (a,))
    out.vjp = lambda g: (g / a.data,)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data, (a, b))
    out.vjp = lambda g: (g @ b.data.T, a.data.T @ g)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    val = _sigmoid(a.data)
    out = Tensor(val, (a,))
    out.vjp = lambda g: (g * val * (1.0 - val),)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    mask = a.data >= 0
    scale = np.where(mask, 1.0, slope).astype(a.data.dtype)
    out = Tensor(a.data * scale, (a,))
    out.vjp = lambda g: (g * scale,)
    return out


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    out.vjp = vjp
    return out


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def tmax(a, axis: int, keepdims=False) -> Tensor:
    """Max along one axis; gradient flows to the argmax only (lowest index on ties)."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    val = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        val = np.squeeze(val, axis=axis)
    out = Tensor(val, (a,))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), g, axis=axis)
        return (ga,)

    out.vjp = vjp
    return out


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax with a fused closed-form backward pass."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    w = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(w, (a,))

    def vjp(g):
        dot = (g * w).sum(axis=axis, keepdims=True)
        return (w * (g - dot),)

    out.vjp = vjp
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), (a,))
    out.vjp = lambda g: (g.reshape(a.data.shape),)
    return out


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    out.vjp = lambda g: tuple(np.split(g, splits, axis=axis))
    return out


def take_rows(a, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds (indices may repeat)."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    out = Tensor(a.data[idx], (a,))

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    out.vjp = vjp
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(out: Tensor) -> None:
    """Accumulate gradients of a scalar `out` into every reachable node's .grad."""
    if out.data.size != 1:
        raise GraphError("backward expects a scalar output")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    out.grad = np.ones_like(out.data)
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            g = g.astype(parent.data.dtype, copy=False)
            # first contribution is borrowed, later ones allocate: vjp outputs
            # may alias upstream buffers, so never accumulate in place
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# parameter vectors
# ---------------------------------------------------------------------------


@dataclass
class ParamVector:
    """Flat parameter storage with a named-segment layout.

    Serializes to raw little-endian float64 alongside a JSON sidecar that
    records the layout, so weights round-trip across platforms.
    """

    data: np.ndarray
    layout: list[tuple[str, tuple[int, ...]]]

    def __post_init__(self):
        total = sum(int(np.prod(s)) for _, s in self.layout)
        if self.data.ndim != 1 or self.data.size != total:
            raise ValueError(f"flat size {self.data.size} != layout size {total}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("non-finite parameter values")

    @classmethod
    def from_segments(cls, segments: dict[str, np.ndarray], dtype=np.float64) -> "ParamVector":
        layout = [(name, tuple(arr.shape)) for name, arr in segments.items()]
        flat = np.concatenate([np.asarray(arr, dtype=dtype).ravel() for arr in segments.values()])
        return cls(flat, layout)

    def _offsets(self):
        off = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            yield name, shape, off, size
            off += size

    def view(self, name: str) -> np.ndarray:
        for nm, shape, off, size in self._offsets():
            if nm == name:
                return self.data[off : off + size].reshape(shape)
        raise KeyError(name)

    def segments(self) -> dict[str, np.ndarray]:
        return {nm: self.data[off : off + size].reshape(shape) for nm, shape, off, size in self._offsets()}

    def leaves(self) -> dict[str, Tensor]:
        """Fresh leaf tensors viewing the current parameter values."""
        return {name: Tensor(arr) for name, arr in self.segments().items()}

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), list(self.layout))

    def astype(self, dtype) -> "ParamVector":
        return ParamVector(self.data.astype(dtype), list(self.layout))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        self.data.astype("<f8").tofile(path)
        sidecar = {"layout": [[n, list(s)] for n, s in self.layout], "dtype": "<f8"}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "ParamVector":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        data = np.fromfile(path, dtype="<f8")
        layout = [(n, tuple(s)) for n, s in sidecar["layout"]]
        return cls(data, layout)


def gather_grads(leaves: dict[str, Tensor], params: ParamVector) -> np.ndarray:
    """Assemble leaf gradients into a flat vector aligned with `params`."""
    chunks = []
    for name, shape in params.layout:
        g = leaves[name].grad
        if g is None:
            g = np.zeros(shape, dtype=params.data.dtype)
        chunks.append(np.asarray(g, dtype=params.data.dtype).ravel())
    return np.concatenate(chunks)


def grad(loss_fn, params: ParamVector) -> np.ndarray:
    """Exact reverse-mode gradient of `loss_fn(leaves) -> scalar Tensor`."""
    return value_and_grad(loss_fn, params)[1]


def value_and_grad(loss_fn, params: ParamVector) -> tuple[float, np.ndarray]:
    leaves = params.leaves()
    out = loss_fn(leaves)
    if not isinstance(out, Tensor):
        raise GraphError("loss function must return a Tensor")
    backward(out)
    return float(out.data), gather_grads(leaves, params)


# ---------------------------------------------------------------------------
# MLP helpers
# ---------------------------------------------------------------------------


def init_mlp_params(arch: list[int], seed: int, prefix: str = "", dtype=np.float64) -> ParamVector:
    """Glorot-uniform weights, zero biases, drawn from a Philox stream."""
    rng = np.random.Generator(np.random.Philox(seed))
    segments: dict[str, np.ndarray] = {}
    for i, (fan_in, fan_out) in enumerate(zip(arch[:-1], arch[1:])):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        segments[f"{prefix}W{i}"] = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        segments[f"{prefix}b{i}"] = np.zeros(fan_out)
    return ParamVector.from_segments(segments, dtype=dtype)


def mlp_apply(leaves: dict[str, Tensor], arch: list[int], x: Tensor, prefix: str = "") -> Tensor:
    """Feed-forward pass with leaky-ReLU hidden layers and a linear output."""
    h = x
    n_layers = len(arch) - 1
    for i in range(n_layers):
        h = matmul(h, leaves[f"{prefix}W{i}"]) + leaves[f"{prefix}b{i}"]
        if i < n_layers - 1:
            h = leaky_relu(h)
    return h


def mlp_forward(params: ParamVector, arch: list[int], x: np.ndarray, prefix: str = "") -> np.ndarray:
    """Plain-numpy MLP forward (no tape); used on hot search paths."""
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
        squeeze = True
    else:
        squeeze = False
    if x.shape[-1] != arch[0]:
        raise ValueError(f"input width {x.shape[-1]} != arch[0]={arch[0]}")
    h = x
    n_layers = len(arch) - 1
    for i in range(n_layers):
        h = h @ params.view(f"{prefix}W{i}").astype(h.dtype) + params.view(f"{prefix}b{i}").astype(h.dtype)
        if i < n_layers - 1:
            h = np.where(h >= 0, h, LEAKY_SLOPE * h)
    return h[0] if squeeze else h


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamVector, lr: float = 1e-3) -> "AdamState":
        return cls(m=np.zeros_like(params.data), v=np.zeros_like(params.data), lr=lr)


def adam_step(state: AdamState, params: ParamVector, g: np.ndarray) -> tuple[ParamVector, AdamState]:
    """One bias-corrected Adam update; mutates `params` and `state` in place."""
    if g.shape != params.data.shape:
        raise ValueError("gradient shape mismatch")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    params.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state
