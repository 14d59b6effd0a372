"""Real-input FFT built on the radix-2 complex kernel.

A length-``n`` real signal is packed into a length ``n/2`` complex signal
(even samples in the real part, odd samples in the imaginary part), transformed,
and unpacked into the ``n/2 + 1`` non-negative-frequency bins.
"""
from __future__ import annotations

import functools

import numpy as np

from . import _kernels
from .errors import DimensionError


def _complex_dtype(dtype) -> np.dtype:
    return np.dtype(np.complex64) if np.dtype(dtype) == np.float32 else np.dtype(np.complex128)


@functools.lru_cache(maxsize=64)
def _unpack_twiddles(n: int, dtype: str) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(n // 2 + 1) / n).astype(dtype)


@functools.lru_cache(maxsize=64)
def _pack_twiddles(n: int, dtype: str) -> np.ndarray:
    return np.exp(2j * np.pi * np.arange(n // 2) / n).astype(dtype)


def _check_pow2(n: int) -> None:
    if not _kernels.is_pow2(n):
        raise DimensionError(f"FFT length must be a power of two, got {n}")


def fft(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unnormalized complex FFT along the last axis (inverse uses +i, no 1/n)."""
    a = np.asarray(a)
    _check_pow2(a.shape[-1])
    if not np.iscomplexobj(a):
        a = a.astype(_complex_dtype(a.dtype))
    return _kernels.fft_c2c(a, inverse)


def rfft(a: np.ndarray) -> np.ndarray:
    """Spectrum of a real signal along the last axis; returns ``n//2 + 1`` bins."""
    a = np.asarray(a)
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    n = a.shape[-1]
    _check_pow2(n)
    cdt = _complex_dtype(a.dtype)
    if n == 1:
        return a.astype(cdt)
    m = n // 2
    z = np.empty(a.shape[:-1] + (m,), dtype=cdt)
    z.real = a[..., 0::2]
    z.imag = a[..., 1::2]
    Z = _kernels.fft_c2c(z, False, overwrite=True)
    return _kernels.rfft_unpack(Z, _unpack_twiddles(n, cdt.str))


def irfft(spec: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`rfft` for a length-``n`` real signal."""
    spec = np.asarray(spec)
    _check_pow2(n)
    if spec.shape[-1] != n // 2 + 1:
        raise DimensionError(f"spectrum has {spec.shape[-1]} bins, expected {n // 2 + 1}")
    rdt = np.float32 if spec.dtype == np.complex64 else np.float64
    if n == 1:
        return spec.real.astype(rdt)
    m = n // 2
    Z = _kernels.irfft_pack(spec, _pack_twiddles(n, spec.dtype.str))
    z = _kernels.fft_c2c(Z, True, overwrite=True)
    z *= np.asarray(1.0 / m, dtype=rdt)
    out = np.empty(spec.shape[:-1] + (n,), dtype=rdt)
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def dft_naive(a: np.ndarray) -> np.ndarray:
    """O(n^2) DFT of the last axis; used as an oracle only."""
    a = np.asarray(a, dtype=np.complex128)
    n = a.shape[-1]
    k = np.arange(n)
    W = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return a @ W.T
