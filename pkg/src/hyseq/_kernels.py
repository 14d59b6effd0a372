"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time from the ``HYSEQ_KERNELS``
environment variable (``numba`` or ``numpy``). If numba is not importable the
numpy path is used regardless. Both implementations are always importable by
name so they can be benchmarked against each other in one process.
"""
from __future__ import annotations

import functools
import os
import warnings

import numpy as np

try:
    import numba
    from numba import njit

    HAS_NUMBA = True
    # the bundled TBB is often too old; avoid the warning unless a layer was chosen
    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "workqueue"
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

_requested = os.environ.get("HYSEQ_KERNELS", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"HYSEQ_KERNELS must be 'numba' or 'numpy', got {_requested!r}")
if _requested == "numba" and not HAS_NUMBA:  # pragma: no cover
    warnings.warn("numba not importable; using numpy kernels")
BACKEND = "numba" if (_requested == "numba" and HAS_NUMBA) else "numpy"


def is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_pow2(n: int) -> int:
    return 1 if n <= 1 else 1 << (int(n) - 1).bit_length()


@functools.lru_cache(maxsize=64)
def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n, dtype=np.int64)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@functools.lru_cache(maxsize=64)
def _twiddles(n: int, inverse: bool, dtype: str) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    k = np.arange(max(n // 2, 1), dtype=np.float64)
    return np.exp(sign * 2j * np.pi * k / n).astype(dtype)


# ---------------------------------------------------------------------------
# complex radix-2 FFT along the last axis of a 2-D array (unnormalized)

if HAS_NUMBA:

    @njit(cache=True, nogil=True)
    def _fft_rows_nb(a, rev, tw):
        rows, n = a.shape
        for r in range(rows):
            row = a[r]
            for i in range(n):
                j = rev[i]
                if j > i:
                    tmp = row[i]
                    row[i] = row[j]
                    row[j] = tmp
            size = 2
            while size <= n:
                half = size // 2
                step = n // size
                for start in range(0, n, size):
                    k = 0
                    for j in range(start, start + half):
                        t = tw[k] * row[j + half]
                        u = row[j]
                        row[j] = u + t
                        row[j + half] = u - t
                        k += step
                size *= 2

    @njit(cache=True, nogil=True)
    def _causal_conv_naive_nb(x, h, out):
        rows, n = x.shape
        for r in range(rows):
            for t in range(n):
                acc = 0.0
                for s in range(t + 1):
                    acc += h[r, t - s] * x[r, s]
                out[r, t] = acc


    @njit(cache=True, nogil=True)
    def _rfft_unpack_nb(Z, w, out):
        rows, m = Z.shape
        for r in range(rows):
            for k in range(m + 1):
                zk = Z[r, k % m]
                zc = Z[r, (m - k) % m].conjugate()
                out[r, k] = 0.5 * (zk + zc) - 0.5j * w[k] * (zk - zc)

    @njit(cache=True, nogil=True)
    def _irfft_pack_nb(X, w, out):
        rows, m1 = X.shape
        m = m1 - 1
        for r in range(rows):
            for k in range(m):
                xk = X[r, k]
                xc = X[r, m - k].conjugate()
                out[r, k] = 0.5 * (xk + xc) + 0.5j * w[k] * (xk - xc)

    @njit(cache=True, nogil=True)
    def _short_conv_fwd_nb(x, w, b, out):
        # x, out: [B, L, C]; w: [C, K]
        B, L, C = x.shape
        K = w.shape[1]
        for i in range(B):
            for t in range(L):
                for c in range(C):
                    out[i, t, c] = b[c] + w[c, 0] * x[i, t, c]
                for k in range(1, min(K, t + 1)):
                    for c in range(C):
                        out[i, t, c] += w[c, k] * x[i, t - k, c]

    @njit(cache=True, nogil=True)
    def _short_conv_bwd_nb(g, x, w, gx, gw, gb):
        B, L, C = x.shape
        K = w.shape[1]
        for i in range(B):
            for t in range(L):
                for c in range(C):
                    gb[c] += g[i, t, c]
                    gx[i, t, c] = w[c, 0] * g[i, t, c]
                for k in range(1, min(K, L - t)):
                    for c in range(C):
                        gx[i, t, c] += w[c, k] * g[i, t + k, c]
                for k in range(0, min(K, t + 1)):
                    for c in range(C):
                        gw[c, k] += g[i, t, c] * x[i, t - k, c]

    @njit(cache=True, nogil=True)
    def _gelu_bwd_nb(g, x, t, out):
        c = 0.7978845608028654
        for i in range(x.size):
            xi = x[i]
            ti = t[i]
            d = c * (1.0 + 0.134145 * xi * xi)
            out[i] = g[i] * (0.5 * (1.0 + ti) + 0.5 * xi * (1.0 - ti * ti) * d)


def fft_numba(a: np.ndarray, inverse: bool = False, overwrite: bool = False) -> np.ndarray:
    """Unnormalized complex FFT over the last axis of ``a`` (rows x n), numba path.

    With ``overwrite`` a C-contiguous input is transformed in place.
    """
    if not HAS_NUMBA:  # pragma: no cover
        raise RuntimeError("numba is not available")
    if overwrite and a.flags.c_contiguous and a.flags.writeable:
        a2 = a
    else:
        a2 = np.array(a, copy=True, order="C")
    n = a2.shape[-1]
    if n == 1:
        return a2
    flat = a2.reshape(-1, n)
    _fft_rows_nb(flat, _bitrev(n), _twiddles(n, inverse, a2.dtype.str))
    return a2


def fft_numpy(a: np.ndarray, inverse: bool = False, overwrite: bool = False) -> np.ndarray:
    """Same transform as :func:`fft_numba`, vectorized radix-2 decimation in time."""
    a = np.asarray(a)
    n = a.shape[-1]
    lead = a.shape[:-1]
    sign = 1.0 if inverse else -1.0
    # column c of X holds the DFT of the stride-(n/m) subsequence starting at c
    X = a.reshape(-1, 1, n)
    m = 1
    while m < n:
        cols = X.shape[2] // 2
        even = X[:, :, :cols]
        odd = X[:, :, cols:]
        f = np.exp(sign * 1j * np.pi * np.arange(m) / m).astype(a.dtype)[None, :, None]
        t = f * odd
        X = np.concatenate([even + t, even - t], axis=1)
        m *= 2
    return X.reshape(*lead, n)


def rfft_unpack_numba(Z: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Half-length complex spectrum of the packed signal -> m + 1 real-FFT bins."""
    m = Z.shape[-1]
    Z2 = np.ascontiguousarray(Z).reshape(-1, m)
    out = np.empty((Z2.shape[0], m + 1), dtype=Z.dtype)
    _rfft_unpack_nb(Z2, w, out)
    return out.reshape(Z.shape[:-1] + (m + 1,))


def rfft_unpack_numpy(Z: np.ndarray, w: np.ndarray) -> np.ndarray:
    m = Z.shape[-1]
    k = np.arange(m + 1)
    Zk = Z[..., k % m]
    Zc = np.conj(Z[..., (m - k) % m])
    return 0.5 * (Zk + Zc) - 0.5j * w * (Zk - Zc)


def irfft_pack_numba(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    """m + 1 real-FFT bins -> half-length spectrum of the packed signal."""
    m = X.shape[-1] - 1
    X2 = np.ascontiguousarray(X).reshape(-1, m + 1)
    out = np.empty((X2.shape[0], m), dtype=X.dtype)
    _irfft_pack_nb(X2, w, out)
    return out.reshape(X.shape[:-1] + (m,))


def irfft_pack_numpy(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    m = X.shape[-1] - 1
    k = np.arange(m)
    Xk = X[..., k]
    Xc = np.conj(X[..., m - k])
    return 0.5 * (Xk + Xc) + 0.5j * w * (Xk - Xc)


def gelu_bwd_numba(g: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """d/dx of the tanh-approximate GELU times ``g``; ``t`` is the forward tanh."""
    out = np.empty_like(x)
    _gelu_bwd_nb(np.ascontiguousarray(g, dtype=x.dtype).reshape(-1), x.reshape(-1),
                 t.reshape(-1), out.reshape(-1))
    return out


def gelu_bwd_numpy(g: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    c = np.asarray(0.7978845608028654, dtype=x.dtype)
    d = c * (1 + np.asarray(0.134145, dtype=x.dtype) * (x * x))
    return g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * d)


def short_conv_fwd_numba(x, w, b):
    """Depthwise causal conv over axis 1 of [B, L, C]; tap k acts at lag k."""
    x3 = np.ascontiguousarray(x).reshape(-1, x.shape[-2], x.shape[-1])
    out = np.empty_like(x3)
    _short_conv_fwd_nb(x3, np.ascontiguousarray(w, dtype=x3.dtype),
                       np.ascontiguousarray(b, dtype=x3.dtype), out)
    return out.reshape(x.shape)


def short_conv_bwd_numba(g, x, w):
    x3 = np.ascontiguousarray(x).reshape(-1, x.shape[-2], x.shape[-1])
    g3 = np.ascontiguousarray(g, dtype=x3.dtype).reshape(x3.shape)
    gx = np.empty_like(x3)
    gw = np.zeros(w.shape, dtype=np.float64)
    gb = np.zeros(w.shape[0], dtype=np.float64)
    _short_conv_bwd_nb(g3, x3, np.ascontiguousarray(w, dtype=x3.dtype), gx, gw, gb)
    return gx.reshape(x.shape), gw.astype(w.dtype), gb.astype(w.dtype)


def short_conv_fwd_numpy(x, w, b):
    L = x.shape[-2]
    y = x * w[:, 0] + b
    for k in range(1, min(w.shape[1], L)):
        y[..., k:, :] += x[..., : L - k, :] * w[:, k]
    return y


def short_conv_bwd_numpy(g, x, w):
    L, K = x.shape[-2], w.shape[1]
    lead = tuple(range(x.ndim - 1))
    gx = g * w[:, 0]
    gw = np.zeros_like(w)
    gw[:, 0] = (g * x).sum(axis=lead)
    for k in range(1, min(K, L)):
        gx[..., : L - k, :] += g[..., k:, :] * w[:, k]
        gw[:, k] = (g[..., k:, :] * x[..., : L - k, :]).sum(axis=lead)
    return gx, gw, g.sum(axis=lead)


def causal_conv_naive_numba(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x)
    h = np.ascontiguousarray(h, dtype=x.dtype)
    out = np.empty_like(x)
    _causal_conv_naive_nb(x.reshape(-1, x.shape[-1]), h.reshape(-1, h.shape[-1]),
                          out.reshape(-1, x.shape[-1]))
    return out


def causal_conv_naive_numpy(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    out = np.zeros(np.broadcast_shapes(x.shape, h.shape), dtype=np.result_type(x, h))
    for k in range(n):
        out[..., k:] += h[..., k:k + 1] * x[..., : n - k]
    return out


if BACKEND == "numba":
    fft_c2c = fft_numba
    rfft_unpack = rfft_unpack_numba
    irfft_pack = irfft_pack_numba
    gelu_bwd = gelu_bwd_numba
    short_conv_fwd = short_conv_fwd_numba
    short_conv_bwd = short_conv_bwd_numba
    causal_conv_naive_rows = causal_conv_naive_numba
else:
    fft_c2c = fft_numpy
    rfft_unpack = rfft_unpack_numpy
    irfft_pack = irfft_pack_numpy
    gelu_bwd = gelu_bwd_numpy
    short_conv_fwd = short_conv_fwd_numpy
    short_conv_bwd = short_conv_bwd_numpy
    causal_conv_naive_rows = causal_conv_naive_numpy
