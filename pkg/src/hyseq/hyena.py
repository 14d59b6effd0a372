"""Order-2 Hyena operator with an implicitly parameterized long filter, plus the
causal softmax-attention baseline it replaces."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .conv import causal_conv_fft
from .errors import DimensionError
from .nn import Linear, Module, Parameter, uniform_fan_in
from .tensor import Tensor, record_op


class ImplicitFilter(Module):
    """Maps a position index to a D-channel filter value through a sine MLP.

    Positions are normalized by ``max_len`` so a filter tap keeps its meaning
    when the same operator runs at a shorter length (sequence-length warm-up,
    prompts of varying size). Each channel's response is damped by
    ``exp(-decay[c] * t / max_len)``; decay rates are fixed, not trained.
    """

    def __init__(self, d_model: int, max_len: int, rng, emb_dim: int = 5, hidden: int = 64,
                 sine_freq: float = 1.0, fast_decay_pct: float = 0.3,
                 slow_decay_pct: float = 1.5, target: float = 1e-2, dtype=np.float32):
        if emb_dim < 3 or emb_dim % 2 == 0:
            raise ValueError("emb_dim must be odd and >= 3 (linear term + cos/sin pairs)")
        self.d_model = d_model
        self.max_len = int(max_len)
        self.emb_dim = emb_dim
        self.sine_freq = float(sine_freq)
        self.w1 = uniform_fan_in(rng, (emb_dim, hidden), emb_dim, dtype)
        self.b1 = uniform_fan_in(rng, (hidden,), emb_dim, dtype)
        self.w2 = uniform_fan_in(rng, (hidden, hidden), hidden, dtype)
        self.b2 = uniform_fan_in(rng, (hidden,), hidden, dtype)
        self.w3 = uniform_fan_in(rng, (hidden, d_model), hidden, dtype)
        lo = abs(math.log(target)) / slow_decay_pct
        hi = abs(math.log(target)) / fast_decay_pct
        self.decay = np.linspace(lo, hi, d_model)

    def positional_features(self, L: int) -> np.ndarray:
        """[t/max_len, cos(2 pi f t/max_len)..., -sin(2 pi f t/max_len)...] for t < L."""
        bands = (self.emb_dim - 1) // 2
        tn = np.arange(L, dtype=np.float64) / self.max_len
        f = np.linspace(1e-4, bands - 1, bands) if bands > 1 else np.array([1e-4])
        ang = 2 * np.pi * tn[:, None] * f[None, :]
        return np.concatenate([tn[:, None], np.cos(ang), -np.sin(ang)], axis=1)

    def modulation(self, L: int) -> np.ndarray:
        tn = np.arange(L, dtype=np.float64) / self.max_len
        return np.exp(-tn[:, None] * np.asarray(self.decay)[None, :])

    def __call__(self, L: int) -> Tensor:
        if L < 1:
            raise DimensionError("filter length must be >= 1")
        dtype = self.w1.dtype
        z = Tensor(self.positional_features(L).astype(dtype))
        a = T.sin(T.linear(z, self.w1, self.b1) * self.sine_freq)
        a = T.sin(T.linear(a, self.w2, self.b2) * self.sine_freq)
        k = T.matmul(a, self.w3)
        return k * Tensor(self.modulation(L).astype(dtype))


class ShortConv(Module):
    """Depthwise causal convolution of width ``kernel`` (no lookahead)."""

    def __init__(self, d: int, rng, kernel: int = 3, dtype=np.float32):
        self.weight = uniform_fan_in(rng, (d, kernel), kernel, dtype)
        self.bias = uniform_fan_in(rng, (d,), kernel, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.short_conv(x, self.weight, self.bias)


class HyenaOperator(Module):
    """H(x1, x2) v = D_{x2} T_h D_{x1} v applied independently per channel.

    Each of x1, x2, v is a dense projection followed by a short causal conv.
    The long convolution adds a per-channel skip ``conv_bias * u``.
    """

    def __init__(self, d_model: int, max_len: int, rng, dtype=np.float32, out_std: float = 0.02,
                 filter_emb_dim: int = 5, filter_hidden: int = 64, short_kernel: int = 3,
                 sine_freq: float = 1.0):
        self.d_model = d_model
        self.proj_x1 = Linear(d_model, d_model, rng, dtype)
        self.proj_x2 = Linear(d_model, d_model, rng, dtype)
        self.proj_v = Linear(d_model, d_model, rng, dtype)
        self.short_x1 = ShortConv(d_model, rng, short_kernel, dtype)
        self.short_x2 = ShortConv(d_model, rng, short_kernel, dtype)
        self.short_v = ShortConv(d_model, rng, short_kernel, dtype)
        self.filter = ImplicitFilter(d_model, max_len, rng, emb_dim=filter_emb_dim,
                                     hidden=filter_hidden, sine_freq=sine_freq, dtype=dtype)
        self.conv_bias = Parameter(rng.standard_normal(d_model).astype(dtype))
        self.out_proj = Linear(d_model, d_model, rng, dtype, std=out_std)

    def projections(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        x1 = self.short_x1(self.proj_x1(x))
        x2 = self.short_x2(self.proj_x2(x))
        v = self.short_v(self.proj_v(x))
        return x1, x2, v

    def gate_conv_gate(self, x1: Tensor, x2: Tensor, v: Tensor, h: Tensor) -> Tensor:
        """y = x2 * (h * (x1 * v) + conv_bias * (x1 * v)), inputs [B, L, D], h [L, D]."""
        u = x1 * v
        # the convolution runs time-last; explicit copies keep the gates contiguous
        w = causal_conv_fft(T.swapaxes_copy(u, 1, 2), T.swapaxes_copy(h, 0, 1), self.conv_bias)
        return x2 * T.swapaxes_copy(w, 1, 2)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.d_model:
            raise DimensionError(f"expected [B, L, {self.d_model}], got {x.shape}")
        x1, x2, v = self.projections(x)
        h = self.filter(x.shape[1])
        return self.out_proj(self.gate_conv_gate(x1, x2, v, h))


# ---------------------------------------------------------------------------
# attention baseline

def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(D), causal) v for [B, L, D] inputs.

    The full [B, L, L] probability matrix is materialized and kept for the
    backward pass, as in plain scaled dot-product attention.
    """
    qd, kd, vd = q.data, k.data, v.data
    D = qd.shape[-1]
    scale = np.asarray(1.0 / math.sqrt(D), dtype=qd.dtype)
    P = qd @ np.swapaxes(kd, 1, 2)
    P *= scale
    P[:, np.triu(np.ones(P.shape[1:], dtype=bool), k=1)] = -np.inf
    P -= P.max(axis=-1, keepdims=True)
    np.exp(P, out=P)
    P /= P.sum(axis=-1, keepdims=True)
    out = P @ vd

    def bw(g):
        dv = np.swapaxes(P, 1, 2) @ g
        dS = g @ np.swapaxes(vd, 1, 2)
        dS -= (g * out).sum(axis=-1)[..., None]
        dS *= P
        dS *= scale
        return dS @ kd, np.swapaxes(dS, 1, 2) @ qd, dv

    return record_op(out, (q, k, v), bw)


class CausalSelfAttention(Module):
    """Single-head scaled dot-product attention with a causal mask."""

    def __init__(self, d_model: int, rng, dtype=np.float32, out_std: float = 0.02):
        self.d_model = d_model
        self.w_q = Linear(d_model, d_model, rng, dtype, bias=False)
        self.w_k = Linear(d_model, d_model, rng, dtype, bias=False)
        self.w_v = Linear(d_model, d_model, rng, dtype, bias=False)
        self.out_proj = Linear(d_model, d_model, rng, dtype, std=out_std)

    def attention_weights(self, x: np.ndarray) -> np.ndarray:
        """Explicit [B, L, L] causal attention matrix, for inspection."""
        x = np.asarray(x)
        q = x @ self.w_q.weight.data
        k = x @ self.w_k.weight.data
        S = q @ np.swapaxes(k, 1, 2) / math.sqrt(self.d_model)
        L = x.shape[1]
        S = np.where(np.triu(np.ones((L, L), dtype=bool), k=1), -np.inf, S)
        return T.softmax_np(S)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.d_model:
            raise DimensionError(f"expected [B, L, {self.d_model}], got {x.shape}")
        return self.out_proj(causal_attention(self.w_q(x), self.w_k(x), self.w_v(x)))

