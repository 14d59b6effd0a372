"""Parameter containers and the small layers shared by every mixer."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import _kernels
from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


class Module:
    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def normal(rng: np.random.Generator, shape, std: float, dtype) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape).astype(dtype))


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype) -> Parameter:
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))


def zeros(shape, dtype) -> Parameter:
    return Parameter(np.zeros(shape, dtype=dtype))


def ones(shape, dtype) -> Parameter:
    return Parameter(np.ones(shape, dtype=dtype))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float32, std: float = 0.02,
                 bias: bool = True):
        self.weight = normal(rng, (d_in, d_out), std, dtype)
        self.bias = zeros((d_out,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        self.weight = ones((d,), dtype)
        self.bias = zeros((d,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


def _gelu_np(x):
    c = np.asarray(T._GELU_C, dtype=x.dtype)
    t = np.tanh(c * (x + np.asarray(0.044715, dtype=x.dtype) * (x * x * x)))
    return 0.5 * x * (1 + t), t


def ffn_fused(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
              rows: int = 8192) -> Tensor:
    """gelu(x w1 + b1) w2 + b2 in row chunks; the hidden layer is never stored.

    Backward recomputes the hidden activations chunk by chunk, so memory is
    O(rows * hidden) instead of O(N * hidden).
    """
    xd = x.data
    lead, d = xd.shape[:-1], xd.shape[-1]
    x2 = xd.reshape(-1, d)
    out = np.empty((x2.shape[0], w2.shape[1]), dtype=xd.dtype)
    for i in range(0, x2.shape[0], rows):
        a, _ = _gelu_np(x2[i:i + rows] @ w1.data + b1.data)
        out[i:i + rows] = a @ w2.data + b2.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        dx = np.empty_like(x2)
        dw1 = np.zeros_like(w1.data)
        dw2 = np.zeros_like(w2.data)
        db1 = np.zeros_like(b1.data)
        for i in range(0, x2.shape[0], rows):
            xc, gc = x2[i:i + rows], g2[i:i + rows]
            pre = xc @ w1.data + b1.data
            a, t = _gelu_np(pre)
            dw2 += a.T @ gc
            dpre = _kernels.gelu_bwd(gc @ w2.data.T, np.ascontiguousarray(pre), t)
            dw1 += xc.T @ dpre
            db1 += dpre.sum(axis=0)
            dx[i:i + rows] = dpre @ w1.data.T
        return dx.reshape(xd.shape), dw1, db1, dw2, g2.sum(axis=0)

    return T.record_op(out.reshape(*lead, -1), (x, w1, b1, w2, b2), bw)


class FeedForward(Module):
    """Position-wise D -> expansion*D -> D with GELU.

    ``fused=True`` switches to :func:`ffn_fused`, trading one extra hidden
    matmul in the backward pass for not storing the hidden activations.
    """

    def __init__(self, d: int, expansion: int, rng, dtype=np.float32, out_std: float = 0.02,
                 fused: bool = False):
        self.fc1 = Linear(d, expansion * d, rng, dtype)
        self.fc2 = Linear(expansion * d, d, rng, dtype, std=out_std)
        self.fused = fused

    def __call__(self, x: Tensor) -> Tensor:
        if self.fused:
            return ffn_fused(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)
        return self.fc2(T.gelu(self.fc1(x)))
