import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hyseq import _kernels as K
from hyseq import conv, spectral
from hyseq.bench import scaling_fit
from hyseq.conv import (ConvRequest, causal_conv_fft, causal_conv_naive, circular_conv_bidirectional,
                        circular_sum_oracle, convolve, toeplitz)
from hyseq.errors import DimensionError, SizeError
from hyseq.tensor import Tensor
from hyseq.verify import gradcheck, toeplitz_conv
from hyseq import tensor as T


def rel(a, b):
    return np.max(np.abs(np.asarray(a) - b)) / max(np.max(np.abs(b)), 1e-30)


# ---------------------------------------------------------------------------
# FFT

@pytest.mark.parametrize("n", [1, 2, 4, 8, 32, 256])
def test_fft_matches_dft(n, rng):
    a = rng.standard_normal((3, n)) + 1j * rng.standard_normal((3, n))
    assert rel(spectral.fft(a), spectral.dft_naive(a)) < 1e-10


@pytest.mark.parametrize("p", range(0, 17))
def test_fft_round_trip_all_pow2(p):
    n = 1 << p
    r = np.random.default_rng(p)
    a = (r.standard_normal(n) + 1j * r.standard_normal(n)).astype(np.complex64)
    back = spectral.fft(spectral.fft(a), inverse=True) / n
    assert np.max(np.abs(back - a)) < 1e-5


@pytest.mark.parametrize("p", range(0, 17))
def test_rfft_round_trip_all_pow2(p):
    n = 1 << p
    a = np.random.default_rng(p).standard_normal(n).astype(np.float32)
    spec = spectral.rfft(a)
    assert spec.shape == (n // 2 + 1,)
    assert np.max(np.abs(spectral.irfft(spec, n) - a)) < 1e-5


def test_rfft_matches_dft(rng):
    a = rng.standard_normal((2, 64))
    assert rel(spectral.rfft(a), spectral.dft_naive(a)[..., :33]) < 1e-10


def test_fft_rejects_non_pow2():
    with pytest.raises(DimensionError):
        spectral.fft(np.ones(6))
    with pytest.raises(DimensionError):
        spectral.irfft(np.ones(4, complex), 8)


def test_numba_and_numpy_fft_agree(rng):
    a = (rng.standard_normal((4, 1024)) + 1j * rng.standard_normal((4, 1024)))
    for inv in (False, True):
        assert rel(K.fft_numba(a, inv), K.fft_numpy(a, inv)) < 1e-12


# ---------------------------------------------------------------------------
# causal conv

def test_delta_filter_is_identity():
    x = np.array([1.0, 2, 3, 4])
    np.testing.assert_allclose(causal_conv_fft(x, [1.0, 0, 0, 0]), x, atol=1e-6)
    np.testing.assert_allclose(causal_conv_naive(x, [1.0, 0, 0, 0]), x)


def test_unit_delay():
    x = np.array([1.0, 2, 3, 4])
    np.testing.assert_allclose(causal_conv_fft(x, [0.0, 1, 0, 0]), [0, 1, 2, 3], atol=1e-6)
    np.testing.assert_allclose(causal_conv_naive(x, [0.0, 1, 0, 0]), [0, 1, 2, 3])


def test_ones_filter_gives_prefix_sum(rng):
    x = rng.standard_normal(50)
    np.testing.assert_allclose(causal_conv_naive(x, np.ones(50)), np.cumsum(x), atol=1e-10)


def test_toeplitz_construction():
    h = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(toeplitz(h), [[1, 0, 0], [2, 1, 0], [3, 2, 1]])


def test_random_L64_against_naive(rng):
    x = rng.standard_normal((2, 3, 64))
    h = rng.standard_normal((3, 64))
    assert rel(causal_conv_fft(x, h), causal_conv_naive(x, h)) < 1e-5


@given(L=st.integers(1, 512), C=st.integers(1, 4), seed=st.integers(0, 2**31 - 1))
def test_oracle_equivalence_property(L, C, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((C, L))
    h = r.standard_normal((C, L))
    assert rel(causal_conv_fft(x.astype(np.float32), h.astype(np.float32)), toeplitz_conv(x, h)) < 1e-5


@given(L=st.integers(2, 128), seed=st.integers(0, 2**31 - 1), t=st.integers(1, 127))
def test_causality_property(L, seed, t):
    t = min(t, L - 1)
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, L))
    h = r.standard_normal((2, L))
    x2 = x.copy()
    x2[:, t:] += r.standard_normal((2, L - t)) * 10
    y1, y2 = causal_conv_fft(x, h), causal_conv_fft(x2, h)
    assert np.max(np.abs(y1[:, :t] - y2[:, :t])) <= 1e-6 * max(1.0, np.max(np.abs(y1)))
    n1, n2 = causal_conv_naive(x, h), causal_conv_naive(x2, h)
    np.testing.assert_array_equal(n1[:, :t], n2[:, :t])


@given(L=st.integers(1, 200), seed=st.integers(0, 2**31 - 1), alpha=st.floats(-3, 3))
def test_linearity_property(L, seed, alpha):
    r = np.random.default_rng(seed)
    x1, x2, h1, h2 = (r.standard_normal(L) for _ in range(4))
    f = causal_conv_fft
    lhs = f(alpha * x1 + x2, h1)
    rhs = alpha * f(x1, h1) + f(x2, h1)
    assert np.max(np.abs(lhs - rhs)) <= 1e-5 * max(1.0, np.max(np.abs(rhs)))
    lhs = f(x1, alpha * h1 + h2)
    rhs = alpha * f(x1, h1) + f(x1, h2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-5 * max(1.0, np.max(np.abs(rhs)))


def test_bias_is_post_conv_skip(rng):
    x = rng.standard_normal((3, 16))
    h = rng.standard_normal((3, 16))
    b = rng.standard_normal(3)
    np.testing.assert_allclose(causal_conv_fft(x, h, b), causal_conv_naive(x, h) + b[:, None] * x, atol=1e-6)


def test_length_mismatch_and_guard():
    with pytest.raises(DimensionError):
        causal_conv_fft(np.ones(8), np.ones(7))
    with pytest.raises(SizeError):
        causal_conv_naive(np.ones(conv.NAIVE_MAX_LEN + 1), np.ones(conv.NAIVE_MAX_LEN + 1))


def test_conv_gradients(rng):
    x = Tensor(rng.standard_normal((2, 3, 20)), requires_grad=True)
    h = Tensor(rng.standard_normal((3, 20)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    probe = Tensor(rng.standard_normal((2, 3, 20)))
    assert gradcheck(lambda: T.tsum(causal_conv_fft(x, h, b) * probe), [x, h, b]) < 1e-4


def test_convolve_dispatch(rng):
    x, h = rng.standard_normal(8), rng.standard_normal(8)
    np.testing.assert_allclose(convolve(ConvRequest(x, h)), causal_conv_fft(x, h))
    np.testing.assert_allclose(convolve(ConvRequest(x, h, mode="circular_bidirectional")),
                               circular_conv_bidirectional(x, h))
    with pytest.raises(ValueError):
        convolve(ConvRequest(x, h, mode="nope"))


# ---------------------------------------------------------------------------
# bidirectional

def test_bidirectional_delta_identity(rng):
    L = 16
    x = rng.standard_normal(L)
    h = np.zeros(L)
    h[L // 2] = 1.0
    np.testing.assert_allclose(circular_conv_bidirectional(x, h), x, atol=1e-6)


def test_bidirectional_lag_minus_one_left_shift(rng):
    L = 16
    x = rng.standard_normal(L)
    h = np.zeros(L)
    h[L // 2 - 1] = 1.0
    y = circular_conv_bidirectional(x, h)
    np.testing.assert_allclose(y, np.append(x[1:], 0.0), atol=1e-6)
    np.testing.assert_allclose(circular_sum_oracle(x, h), np.append(x[1:], 0.0), atol=1e-12)


@given(half=st.integers(1, 64), seed=st.integers(0, 2**31 - 1))
def test_bidirectional_matches_circular_sum(half, seed):
    L = 2 * half
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, L))
    h = r.standard_normal((2, L))
    assert rel(circular_conv_bidirectional(x, h), circular_sum_oracle(x, h)) < 1e-5


def test_bidirectional_sees_future(rng):
    L = 32
    x = rng.standard_normal(L)
    h = rng.standard_normal(L)
    x2 = x.copy()
    x2[-1] += 5
    assert np.abs(circular_conv_bidirectional(x, h)[L - 8] - circular_conv_bidirectional(x2, h)[L - 8]) > 0


def test_bidirectional_odd_length():
    with pytest.raises(DimensionError):
        circular_conv_bidirectional(np.ones(7), np.ones(7))


def test_bidirectional_gradients(rng):
    x = Tensor(rng.standard_normal((2, 12)), requires_grad=True)
    h = Tensor(rng.standard_normal((2, 12)), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    probe = Tensor(rng.standard_normal((2, 12)))
    assert gradcheck(lambda: T.tsum(circular_conv_bidirectional(x, h, b) * probe), [x, h, b]) < 1e-4


# ---------------------------------------------------------------------------
# scaling of the convolution itself

def _median_time(fn, reps=3):
    fn()
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


@pytest.mark.slow
def test_conv_time_exponents():
    r = np.random.default_rng(0)
    fft_pts = []
    for p in range(12, 21, 2):
        L = 1 << p
        x = r.standard_normal((8, L)).astype(np.float32)
        h = r.standard_normal((8, L)).astype(np.float32)
        fft_pts.append((L, _median_time(lambda: causal_conv_fft(x, h))))
    naive_pts = []
    for L in (512, 1024, 2048, 4096, 8192):
        x = r.standard_normal((8, L)).astype(np.float32)
        h = r.standard_normal((8, L)).astype(np.float32)
        naive_pts.append((L, _median_time(lambda: causal_conv_naive(x, h))))
    e_fft, e_naive = scaling_fit(fft_pts), scaling_fit(naive_pts)
    print(f"fft conv exponent {e_fft:.3f}, naive exponent {e_naive:.3f}")
    assert e_fft <= 1.3
    assert e_naive >= 1.8
