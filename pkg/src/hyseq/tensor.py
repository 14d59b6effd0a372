"""Dense arrays with tape-based reverse-mode differentiation.

Every differentiable operation appends a node to the active :class:`Graph`.
A node keeps only the arrays its backward rule needs, so intermediates that
no rule references are released as soon as the forward pass drops them.
``backward`` walks the tape once in reverse and then marks it consumed.

Broadcasting is deliberately narrow: elementwise ops accept equal shapes or a
scalar operand. Per-channel broadcasts go through the named ops
:func:`add_bias` and :func:`scale_channels`.
"""
from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import DimensionError, StateError

_ids = itertools.count()
_state = threading.local()


def _flags():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
        _state.graph = None
    return _state


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_id", "_graph", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._id = next(_ids)
        self._graph: Graph | None = None
        self.name = name

    # -- introspection
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._graph is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a python scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, ax1: int = -2, ax2: int = -1):
        return swapaxes(self, ax1, ax2)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class _Node:
    __slots__ = ("out_id", "inputs", "backward")

    def __init__(self, out_id, inputs, backward):
        self.out_id = out_id
        self.inputs = inputs
        self.backward = backward


class Graph:
    """Ordered record of operations from one forward pass.

    Usable as a context manager to make it the active tape for the current
    thread. Outside any ``with`` block a fresh implicit graph is started
    whenever the previous one has been consumed by :meth:`backward`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._prev = None

    def __enter__(self) -> "Graph":
        st = _flags()
        self._prev = st.graph
        st.graph = self
        return self

    def __exit__(self, *exc) -> None:
        _flags().graph = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        if self.consumed:
            raise StateError("cannot record onto a graph that has already run backward")
        spec = tuple(
            (t._id, t if t.is_leaf else None, t.requires_grad) for t in inputs
        )
        self.nodes.append(_Node(out._id, spec, backward))
        out._graph = self

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if self.consumed:
            raise StateError("backward called twice on the same forward graph")
        if grad is None:
            if loss.size != 1:
                raise DimensionError("backward without an explicit gradient needs a scalar loss")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {loss._id: np.asarray(grad, dtype=loss.dtype)}
        nodes = self.nodes
        while nodes:
            node = nodes.pop()
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            in_grads = node.backward(g)
            node.backward = None
            for (iid, leaf, req), ig in zip(node.inputs, in_grads):
                if ig is None or not req:
                    continue
                if leaf is not None:
                    ig = np.asarray(ig, dtype=leaf.dtype).reshape(leaf.shape)
                    if leaf.grad is None:
                        leaf.grad = ig.copy()
                    else:
                        leaf.grad = leaf.grad + ig
                elif iid in grads:
                    grads[iid] = grads[iid] + ig
                else:
                    grads[iid] = ig
        self.consumed = True


def active_graph() -> Graph:
    st = _flags()
    if st.graph is None or st.graph.consumed:
        st.graph = Graph()
    return st.graph


def reset_graph() -> None:
    """Drop the implicit tape of the current thread (e.g. after an abandoned forward)."""
    st = _flags()
    st.graph = None


def grad_enabled() -> bool:
    return _flags().grad_enabled


@contextlib.contextmanager
def no_grad():
    st = _flags()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf with ``requires_grad``."""
    if loss._graph is None:
        if loss.requires_grad:
            g = np.ones_like(loss.data) if grad is None else grad
            loss.grad = g.copy() if loss.grad is None else loss.grad + g
            return
        raise StateError("loss is not attached to a live graph")
    loss._graph.backward(loss, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output and register ``backward_fn`` on the tape.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    req = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        active_graph().record(out, inputs, backward_fn)
    return out


def _clone_rng(rng: np.random.Generator | None) -> np.random.Generator | None:
    if rng is None:
        return None
    bg = type(rng.bit_generator)()
    bg.state = rng.bit_generator.state
    return np.random.Generator(bg)


def recompute(fn: Callable, x: Tensor, params: Sequence[Tensor] = (),
              rng: np.random.Generator | None = None) -> Tensor:
    """``fn(x, rng)`` without keeping its intermediates on the tape.

    The backward pass replays ``fn`` on a private graph, with the random
    stream restored to its pre-forward state so dropout masks match.
    Gradients for ``params`` reach their ``.grad`` from the private graph.
    """
    if not grad_enabled() or not (x.requires_grad or any(p.requires_grad for p in params)):
        return fn(x, rng)
    replay = _clone_rng(rng)
    with no_grad():
        out = fn(x, rng)

    def bw(g):
        xi = Tensor(x.data, requires_grad=x.requires_grad)
        with Graph() as tape:
            y = fn(xi, replay)
        if y._graph is tape:
            tape.backward(y, g)
        return (xi.grad,) + (None,) * len(params)

    return record_op(out.data, (x, *params), bw)


# ---------------------------------------------------------------------------
# elementwise

def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) or (
        isinstance(x, Tensor) and x.ndim == 0
    )


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (only equal-shape "
                             "or scalar broadcasting is supported)")


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor) or (b.ndim == 0 and a.ndim > 0):
        if isinstance(b, Tensor):
            return record_op(a.data + b.data, (a, b), lambda g: (g, g.sum()))
        c = float(b)
        return record_op(a.data + np.asarray(c, dtype=a.dtype), (a,), lambda g: (g,))
    if a.ndim == 0 and b.ndim > 0:
        return add(b, a)
    _check_same(a, b, "add")
    return record_op(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return record_op(-a.data, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    return add(a, neg(as_tensor(b)) if isinstance(b, Tensor) else -b)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = np.asarray(float(b), dtype=a.dtype)
        return record_op(a.data * c, (a,), lambda g: (g * c,))
    if b.ndim == 0 and a.ndim > 0:
        ad, bd = a.data, b.data
        return record_op(ad * bd, (a, b), lambda g: (g * bd, (g * ad).sum()))
    if a.ndim == 0 and b.ndim > 0:
        return mul(b, a)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return record_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` broadcast along the last axis."""
    if b.shape != x.shape[-1:]:
        raise DimensionError(f"add_bias: bias shape {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return record_op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """``x * s`` with ``s`` broadcast along the last axis."""
    if s.shape != x.shape[-1:]:
        raise DimensionError(f"scale_channels: {s.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    xd, sd = x.data, s.data
    return record_op(xd * sd, (x, s), lambda g: (g * sd, (g * xd).sum(axis=lead)))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return record_op(y, (a,), lambda g: (g * y,))


def sin(a: Tensor) -> Tensor:
    x = a.data
    return record_op(np.sin(x), (a,), lambda g: (g * np.cos(x),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return record_op(y, (a,), lambda g: (g * (1 - y * y),))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = sigmoid_np(x)
    return record_op(x * s, (a,), lambda g: (g * (s * (1 + x * (1 - s))),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = np.asarray(_GELU_C, dtype=x.dtype)
    inner = c * (x + np.asarray(0.044715, dtype=x.dtype) * (x * x * x))
    t = np.tanh(inner)
    y = 0.5 * x * (1 + t)

    def bw(g):
        return (_kernels.gelu_bwd(g, np.ascontiguousarray(x), t),)

    return record_op(y, (a,), bw)


def square(a: Tensor) -> Tensor:
    x = a.data
    return record_op(x * x, (a,), lambda g: (2 * g * x,))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / np.asarray(1.0 - p, dtype=a.dtype)
    return record_op(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-D (shared weight, ``a`` any rank >= 2 or [..., K]) or have the
    same leading batch shape as ``a``.
    """
    if a.ndim < 1 or b.ndim < 2:
        raise DimensionError(f"matmul needs a:[...,K], b:[...,K,N]; got {a.shape}, {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        out = ad @ bd

        def bw(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return record_op(out, (a, b), bw)
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch shapes differ: {a.shape} vs {b.shape}")
    out = ad @ bd
    return record_op(out, (a, b), lambda g: (g @ np.swapaxes(bd, -1, -2),
                                              np.swapaxes(ad, -1, -2) @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add_bias(y, b)


# ---------------------------------------------------------------------------
# reductions and shape ops

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    keep = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(np.reshape(g, keep), shape).copy(),)

    return record_op(np.asarray(a.data.sum(axis=axes)), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axis), 1.0 / n)


def swapaxes_copy(a: Tensor, ax1: int, ax2: int) -> Tensor:
    """:func:`swapaxes` that returns C-ordered arrays in both passes."""
    return record_op(np.ascontiguousarray(np.swapaxes(a.data, ax1, ax2)), (a,),
                     lambda g: (np.ascontiguousarray(np.swapaxes(g, ax1, ax2)),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return record_op(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g) if _fancy(idx) else full.__setitem__(idx, g)
        return (full,)

    return record_op(a.data[idx], (a,), bw)


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return record_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record_op(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"token id out of range [0, {V})")

    def bw(g):
        gw = np.zeros(weight.shape, dtype=weight.dtype)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return record_op(weight.data[ids], (weight,), bw)


# ---------------------------------------------------------------------------
# normalization, softmax, loss

def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_rows(a: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis, stabilized by the row max.

    With ``causal=True`` entry (i, j) of each trailing square block is masked
    for j > i.
    """
    x = a.data
    if causal:
        L, M = x.shape[-2:]
        mask = np.triu(np.ones((L, M), dtype=bool), k=1)
        x = np.where(mask, -np.inf, x)
    y = softmax_np(x)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record_op(y, (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    D = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * rstd
    gd = gain.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx = g * gd
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    del D
    return record_op(xhat * gd + bias.data, (a, gain, bias), bw)


def batch_standardize(a: Tensor, eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-feature (x - mean) / std over the batch axis of a [B, D] tensor.

    Returns the output plus the batch mean and biased variance so callers can
    keep running statistics.
    """
    x = a.data
    if x.ndim != 2:
        raise DimensionError(f"batch_standardize expects [B, D], got {x.shape}")
    mu = x.mean(axis=0)
    xc = x - mu
    var = (xc * xc).mean(axis=0)
    rstd = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * rstd

    def bw(g):
        return (rstd * (g - g.mean(axis=0) - xhat * (g * xhat).mean(axis=0)),)

    return record_op(xhat, (a,), bw), mu, var


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean next-token NLL over positions whose target is not ``ignore_index``."""
    x = logits.data
    V = x.shape[-1]
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    x2 = x.reshape(-1, V)
    if t.shape[0] != x2.shape[0]:
        raise DimensionError(f"{t.shape[0]} targets for {x2.shape[0]} logit rows")
    valid = t != ignore_index
    if np.any((t[valid] < 0) | (t[valid] >= V)):
        raise IndexError(f"target id out of range [0, {V})")
    n = int(valid.sum())
    rows = np.nonzero(valid)[0]
    lsm = log_softmax_np(x2[rows])
    nll = -lsm[np.arange(n), t[rows]]
    loss = nll.sum() / max(n, 1)

    def bw(g):
        gx = np.zeros_like(x2)
        p = np.exp(lsm)
        p[np.arange(n), t[rows]] -= 1.0
        gx[rows] = p * (np.asarray(g, dtype=x.dtype) / max(n, 1))
        return (gx.reshape(x.shape),)

    return record_op(np.asarray(loss, dtype=x.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# short causal depthwise convolution

def short_conv(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Causal depthwise conv over axis -2: y[t,c] = sum_k w[c,k] x[t-k,c] (+ b[c]).

    ``x`` is [..., L, C]; ``w`` is [C, K] with tap k acting at lag k.
    """
    xd, wd = x.data, w.data
    C, K = wd.shape
    if xd.ndim < 2 or xd.shape[-1] != C:
        raise DimensionError(f"short_conv: input {xd.shape} vs weight {wd.shape}")
    bd = b.data if b is not None else np.zeros(C, dtype=xd.dtype)
    y = _kernels.short_conv_fwd(xd, wd, bd)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx, gw, gb = _kernels.short_conv_bwd(g, xd, wd)
        return (gx, gw) if b is None else (gx, gw, gb)

    return record_op(y, inputs, bw)


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    tot = 0.0
    for p in params:
        if p.grad is not None:
            tot += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(tot)
