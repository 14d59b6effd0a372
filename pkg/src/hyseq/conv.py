"""Long convolutions: FFT causal convolution, its Toeplitz oracle, and the
bidirectional circular variant.

Layout is time-last: a signal is ``[..., C, L]`` and a filter is ``[C, L]``
(or ``[L]`` for a single channel); the filter's shape must equal the trailing
dimensions of the signal and is shared across leading batch dimensions.

The optional per-channel ``bias`` is a skip term: the output gains
``bias[c] * x[..., c, t]``, i.e. it acts as an extra weight on lag 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels, spectral
from .errors import DimensionError, SizeError
from .tensor import Tensor, grad_enabled, record_op

NAIVE_MAX_LEN = 8192

# signal rows per FFT batch; bounds transient buffers at long lengths
_CHUNK_ELEMS = 1 << 23


@dataclass
class ConvRequest:
    x: object
    h: object
    bias: object = None
    mode: str = "causal"  # or "circular_bidirectional"


def convolve(req: ConvRequest):
    if req.mode == "causal":
        return causal_conv_fft(req.x, req.h, req.bias)
    if req.mode == "circular_bidirectional":
        return circular_conv_bidirectional(req.x, req.h, req.bias)
    raise ValueError(f"unknown convolution mode {req.mode!r}")


def _data(a):
    return a.data if isinstance(a, Tensor) else np.asarray(a)


def _split(x: np.ndarray, h: np.ndarray):
    L = x.shape[-1]
    if h.shape[-1] != L:
        raise DimensionError(f"filter length {h.shape[-1]} != signal length {L}")
    if L < 1:
        raise DimensionError("signal length must be >= 1")
    if x.shape[x.ndim - h.ndim:] != h.shape:
        raise DimensionError(f"filter shape {h.shape} does not match trailing signal dims {x.shape}")
    C = int(np.prod(h.shape[:-1])) if h.ndim > 1 else 1
    B = x.size // (C * L)
    return B, C, L


def _chunks(B: int, C: int, N: int):
    step = max(1, _CHUNK_ELEMS // max(1, B * N))
    for c0 in range(0, C, step):
        yield c0, min(C, c0 + step)


def _pad(a: np.ndarray, N: int, left: int = 0) -> np.ndarray:
    out = np.zeros(a.shape[:-1] + (N,), dtype=a.dtype)
    out[..., left:left + a.shape[-1]] = a
    return out


# ---------------------------------------------------------------------------
# causal

def _causal_fwd(x3: np.ndarray, h2: np.ndarray, keep: bool = False):
    """Returns y and, with ``keep``, the per-chunk spectra for the backward pass."""
    B, C, L = x3.shape
    N = _kernels.next_pow2(2 * L)
    y = np.empty_like(x3)
    spectra = []
    for c0, c1 in _chunks(B, C, N):
        H = spectral.rfft(_pad(h2[c0:c1], N))
        X = spectral.rfft(_pad(x3[:, c0:c1], N))
        y[:, c0:c1] = spectral.irfft(X * H, N)[..., :L]
        if keep:
            spectra.append((c0, c1, X, H))
    return y, spectra


def _causal_bwd(g3: np.ndarray, spectra, h2: np.ndarray):
    B, C, L = g3.shape
    N = _kernels.next_pow2(2 * L)
    gx = np.empty_like(g3)
    gh = np.empty_like(h2)
    for c0, c1, X, H in spectra:
        G = spectral.rfft(_pad(g3[:, c0:c1], N))
        gx[:, c0:c1] = spectral.irfft(G * np.conj(H), N)[..., :L]
        gh[c0:c1] = spectral.irfft((G * np.conj(X)).sum(axis=0), N)[..., :L]
    return gx, gh


def causal_conv_fft(x, h, bias=None):
    """y[t] = sum_{s<=t} h[t-s] x[s] (+ bias * x[t]) in O(L log L).

    Signal and filter are zero-padded to the next power of two >= 2L so the
    circular product equals the linear convolution, then truncated to L.
    Accepts arrays or Tensors; with Tensor inputs the result is differentiable
    with respect to ``x``, ``h`` and ``bias``.
    """
    xd, hd = _data(x), _data(h)
    dtype = np.result_type(xd.dtype, hd.dtype, np.float32)
    xd = xd.astype(dtype, copy=False)
    hd = hd.astype(dtype, copy=False)
    B, C, L = _split(xd, hd)
    x3 = np.ascontiguousarray(xd).reshape(B, C, L)
    h2 = np.ascontiguousarray(hd).reshape(C, L)
    tensors = [t for t in (x, h, bias) if isinstance(t, Tensor)]
    track = grad_enabled() and any(t.requires_grad for t in tensors)
    # spectra from the forward pass are reused by the backward rule
    y, spectra = _causal_fwd(x3, h2, keep=track)
    bd = None
    if bias is not None:
        bd = _data(bias).astype(dtype, copy=False).reshape(C, 1)
        y += bd * x3
    y = y.reshape(xd.shape)
    if not tensors:
        return y

    def bw(g):
        g3 = np.ascontiguousarray(g).reshape(B, C, L)
        gx, gh = _causal_bwd(g3, spectra, h2)
        grads = {}
        if bd is not None:
            gx += bd * g3
            grads["bias"] = (g3 * x3).sum(axis=(0, 2)).reshape(_data(bias).shape)
        grads["x"] = gx.reshape(xd.shape)
        grads["h"] = gh.reshape(hd.shape)
        return tuple(grads[k] for k, t in zip(("x", "h", "bias"), (x, h, bias))
                     if isinstance(t, Tensor))

    return record_op(y, tensors, bw)


def toeplitz(h) -> np.ndarray:
    """Lower-triangular Toeplitz matrix T with T[i, j] = h[i - j] (zero above the diagonal)."""
    hd = np.asarray(_data(h))
    L = hd.shape[-1]
    i = np.arange(L)
    lag = i[:, None] - i[None, :]
    T = np.where(lag >= 0, hd[..., np.clip(lag, 0, L - 1)], 0.0)
    return T.astype(hd.dtype)


def causal_conv_naive(x, h, bias=None) -> np.ndarray:
    """Explicit O(L^2) causal convolution, the oracle for :func:`causal_conv_fft`."""
    xd, hd = _data(x), _data(h)
    B, C, L = _split(xd, hd)
    if L > NAIVE_MAX_LEN:
        raise SizeError(f"naive convolution limited to L <= {NAIVE_MAX_LEN}, got {L}")
    dtype = np.result_type(xd.dtype, hd.dtype, np.float32)
    x3 = np.ascontiguousarray(xd, dtype=dtype).reshape(B, C, L)
    h3 = np.broadcast_to(np.ascontiguousarray(hd, dtype=dtype).reshape(1, C, L), (B, C, L))
    y = _kernels.causal_conv_naive_rows(x3.reshape(-1, L), np.ascontiguousarray(h3).reshape(-1, L))
    y = y.reshape(B, C, L)
    if bias is not None:
        y = y + _data(bias).astype(dtype).reshape(C, 1) * x3
    return y.reshape(xd.shape)


# ---------------------------------------------------------------------------
# bidirectional

def circular_conv_bidirectional(x, h, bias=None):
    """Non-causal long convolution with a receptive field of L/2 on each side.

    The input is padded with L/2 zeros on the left and on the right and
    convolved circularly with the zero-padded filter at size 2L. Filter index
    ``L/2`` is lag 0, index ``L/2 - 1`` reads one step ahead and index
    ``L/2 + 1`` one step behind::

        y[t] = sum_j h[j] * x[t + L/2 - j]      (x is zero outside [0, L))
    """
    xd, hd = _data(x), _data(h)
    dtype = np.result_type(xd.dtype, hd.dtype, np.float32)
    xd = xd.astype(dtype, copy=False)
    hd = hd.astype(dtype, copy=False)
    B, C, L = _split(xd, hd)
    if L % 2:
        raise DimensionError(f"bidirectional convolution needs even L, got {L}")
    half = L // 2
    N2 = _kernels.next_pow2(2 * L)
    x3 = np.ascontiguousarray(xd).reshape(B, C, L)
    h2 = np.ascontiguousarray(hd).reshape(C, L)
    H = spectral.rfft(_pad(h2, N2))
    X = spectral.rfft(_pad(x3, N2, left=half))
    # with xp = [0]*L/2 + x + [0]*L/2, circular output index n = t + L picks lag t + L/2 - j
    y = spectral.irfft(X * H, N2)[..., L:2 * L]
    bd = None
    if bias is not None:
        bd = _data(bias).astype(dtype).reshape(C, 1)
        y = y + bd * x3
    y = np.ascontiguousarray(y).reshape(xd.shape)
    tensors = [t for t in (x, h, bias) if isinstance(t, Tensor)]
    if not tensors:
        return y

    def bw(g):
        g3 = np.ascontiguousarray(g).reshape(B, C, L)
        G = spectral.rfft(_pad(g3, N2))
        Xl = spectral.rfft(_pad(x3, N2))
        r = spectral.irfft(G * np.conj(H), N2)
        gx = r[..., (np.arange(L) - half) % N2]
        q = spectral.irfft((Xl * np.conj(G)).sum(axis=0), N2)
        gh = q[..., (half - np.arange(L)) % N2]
        grads = {}
        if bd is not None:
            gx = gx + bd * g3
            grads["bias"] = (g3 * x3).sum(axis=(0, 2)).reshape(_data(bias).shape)
        grads["x"] = gx.reshape(xd.shape)
        grads["h"] = gh.reshape(hd.shape)
        return tuple(grads[k] for k, t in zip(("x", "h", "bias"), (x, h, bias))
                     if isinstance(t, Tensor))

    return record_op(y, tensors, bw)


def circular_sum_oracle(x, h) -> np.ndarray:
    """Direct double sum over the padded circular buffer (O(L^2)); oracle only."""
    xd = np.asarray(_data(x), dtype=np.float64)
    hd = np.asarray(_data(h), dtype=np.float64)
    L = xd.shape[-1]
    half = L // 2
    N = 2 * L
    xp = np.zeros(xd.shape[:-1] + (N,))
    xp[..., half:half + L] = xd
    hp = np.zeros(hd.shape[:-1] + (N,))
    hp[..., :L] = hd
    out = np.zeros(np.broadcast_shapes(xd.shape, hd.shape))
    for t in range(L):
        n = t + L
        acc = 0.0
        for m in range(N):
            acc = acc + hp[..., m] * xp[..., (n - m) % N]
        out[..., t] = acc
    return out
