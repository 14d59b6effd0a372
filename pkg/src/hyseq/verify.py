"""Oracle, causality and gradient suites shared by ``selftest`` and the tests.

Each suite returns a :class:`Check` with the worst observed error so callers
can compare against their own tolerance. Functions are looked up through
their modules at call time, so a patched implementation is what gets tested.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import conv, hyena
from . import tensor as T
from .model import DecoderStack, ModelConfig
from .tensor import Tensor


@dataclass
class Check:
    name: str
    worst: float
    tol: float
    trials: int

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.worst) and self.worst < self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: worst={self.worst:.3e} tol={self.tol:.0e} trials={self.trials}"


def _rel_inf(a: np.ndarray, b: np.ndarray) -> float:
    scale = float(np.max(np.abs(b))) if b.size else 0.0
    return float(np.max(np.abs(a - b))) / max(scale, 1e-30) if a.size else 0.0


# ---------------------------------------------------------------------------
# explicit-matrix oracles

def toeplitz_conv(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """y = T_h x with T built entry by entry, float64; x [..., C, L], h [C, L]."""
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    L = x.shape[-1]
    Tm = np.zeros(h.shape[:-1] + (L, L))
    for i in range(L):
        for j in range(i + 1):
            Tm[..., i, j] = h[..., i - j]
    return np.einsum("...ij,...j->...i", Tm, x)


def _short_conv_loop(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    L = x.shape[-2]
    y = np.broadcast_to(b, x.shape).copy()
    for k in range(w.shape[1]):
        y[..., k:, :] += w[:, k] * x[..., :L - k, :]
    return y


def hyena_explicit(op: hyena.HyenaOperator, x: np.ndarray) -> np.ndarray:
    """out_proj( D_{x2} (T_h + diag(bias)) D_{x1} v ) with dense L x L matrices per channel."""
    x = np.asarray(x, dtype=np.float64)
    B, L, D = x.shape
    f64 = lambda p: np.asarray(p.data, dtype=np.float64)

    def proj(lin, sc):
        z = x @ f64(lin.weight) + f64(lin.bias)
        return _short_conv_loop(z, f64(sc.weight), f64(sc.bias))

    x1 = proj(op.proj_x1, op.short_x1)
    x2 = proj(op.proj_x2, op.short_x2)
    v = proj(op.proj_v, op.short_v)
    with T.no_grad():
        h = np.asarray(op.filter(L).data, dtype=np.float64)   # [L, D]
    bias = f64(op.conv_bias)
    y = np.empty_like(v)
    for b in range(B):
        for c in range(D):
            Tm = np.zeros((L, L))
            for i in range(L):
                Tm[i, :i + 1] = h[i::-1, c]
            Tm += bias[c] * np.eye(L)
            y[b, :, c] = np.diag(x2[b, :, c]) @ Tm @ np.diag(x1[b, :, c]) @ v[b, :, c]
    return y @ f64(op.out_proj.weight) + f64(op.out_proj.bias)


# ---------------------------------------------------------------------------
# suites

def conv_oracle_suite(trials: int = 200, max_len: int = 512, max_ch: int = 4, seed: int = 0,
                      tol: float = 1e-5) -> Check:
    """FFT causal conv against the explicit Toeplitz product on random instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        L = int(rng.integers(1, max_len + 1))
        C = int(rng.integers(1, max_ch + 1))
        x = rng.standard_normal((C, L))
        h = rng.standard_normal((C, L))
        y = conv.causal_conv_fft(x.astype(np.float32), h.astype(np.float32))
        ref = conv.causal_conv_naive(x, h) if L > 64 else toeplitz_conv(x, h)
        worst = max(worst, _rel_inf(np.asarray(y, dtype=np.float64), ref))
    return Check("fft conv vs Toeplitz", worst, tol, trials)


def hyena_oracle_suite(lengths=range(2, 33), widths=(1, 2, 4), seed: int = 0,
                       tol: float = 1e-5) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    n = 0
    for L in lengths:
        for D in widths:
            op = hyena.HyenaOperator(D, 64, rng, dtype=np.float64, out_std=0.5)
            x = rng.standard_normal((2, L, D))
            with T.no_grad():
                y = op(Tensor(x)).data
            worst = max(worst, _rel_inf(y, hyena_explicit(op, x)))
            n += 1
    return Check("hyena vs explicit D T D v", worst, tol, n)


def _perturb_case(fn, B, L, rng, discrete: bool, vocab: int = 10):
    t = int(rng.integers(1, L))
    if discrete:
        a = rng.integers(5, 9, size=(B, L))
        b = a.copy()
        b[:, t:] = rng.integers(0, vocab, size=(B, L - t))
    else:
        a = rng.standard_normal((B, L, fn.d))
        b = a.copy()
        b[:, t:] = rng.standard_normal((B, L - t, fn.d)) * 10
    ya, yb = fn(a), fn(b)
    scale = max(float(np.max(np.abs(ya[:, :t]))), 1e-30)
    return float(np.max(np.abs(ya[:, :t] - yb[:, :t]))) / scale


class _MixerFn:
    def __init__(self, mixer):
        self.mixer = mixer
        self.d = mixer.d_model

    def __call__(self, x):
        with T.no_grad():
            return self.mixer(Tensor(x)).data


class _StackFn:
    def __init__(self, model):
        self.model = model

    def __call__(self, ids):
        with T.no_grad():
            return self.model(ids).data


def causality_suite(trials: int = 50, seed: int = 0, tol: float = 1e-6, L: int = 64,
                    d: int = 16) -> list[Check]:
    """Changing inputs at positions >= t must leave outputs before t unchanged."""
    rng = np.random.default_rng(seed)
    out = []
    hy = _MixerFn(hyena.HyenaOperator(d, L, np.random.default_rng(seed), dtype=np.float64, out_std=0.5))
    at = _MixerFn(hyena.CausalSelfAttention(d, np.random.default_rng(seed), dtype=np.float64, out_std=0.5))
    for name, fn in (("hyena mixer", hy), ("attention mixer", at)):
        worst = max(_perturb_case(fn, 2, L, rng, False) for _ in range(trials))
        out.append(Check(f"causality {name}", worst, tol, trials))
    for mixer in ("hyena", "attention"):
        m = DecoderStack(ModelConfig(n_layers=2, d_model=d, mixer=mixer, max_len=L, dtype="float64",
                                     seed=seed))
        m.eval()
        fn = _StackFn(m)
        worst = max(_perturb_case(fn, 2, L, rng, True) for _ in range(trials))
        out.append(Check(f"causality {mixer} stack", worst, tol, trials))
    return out


def gradcheck(loss_fn, tensors: list[Tensor], eps: float = 1e-6, max_entries: int | None = None,
              rng=None) -> float:
    """Largest per-tensor relative error of autodiff vs central differences.

    For each tensor the error is max|analytic - numeric| / max|numeric| over
    the checked entries (all entries, or a random subset of ``max_entries``).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    T.backward(loss)
    worst = 0.0
    for t in tensors:
        ana = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(len(idx))
        with T.no_grad():
            for k, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + eps
                fp = loss_fn().item()
                flat[i] = old - eps
                fm = loss_fn().item()
                flat[i] = old
                num[k] = (fp - fm) / (2 * eps)
        a = ana.reshape(-1)[idx]
        scale = float(np.max(np.abs(num)))
        if scale < 1e-10 and float(np.max(np.abs(a))) < 1e-10:
            continue
        worst = max(worst, float(np.max(np.abs(a - num))) / max(scale, 1e-10))
        t.grad = None
    return worst


def block_gradient_suite(seeds=range(20), L: int = 12, d: int = 8, tol: float = 1e-4,
                         max_entries: int = 24) -> Check:
    """Full residual block (norms, Hyena mixer, FFN) in float64 against central differences."""
    from .model import Block
    worst = 0.0
    for s in seeds:
        rng = np.random.default_rng(s)
        cfg = ModelConfig(n_layers=1, d_model=d, max_len=2 * L, dtype="float64", filter_hidden=8,
                          embed_dropout=0.0)
        blk = Block(cfg, rng)
        # non-trivial norms and output projections so every path carries gradient
        for name, p in blk.named_parameters():
            p.data = p.data + 0.3 * rng.standard_normal(p.shape)
        x = Tensor(rng.standard_normal((2, L, d)), requires_grad=True)
        w = rng.standard_normal((2, L, d))

        def loss_fn():
            y = blk(x, None)
            return T.tsum(y * Tensor(w))

        worst = max(worst, gradcheck(loss_fn, [x] + blk.parameters(), max_entries=max_entries,
                                     rng=rng))
    return Check("block gradient (float64)", worst, tol, len(list(seeds)))


def run_selftest(quick: bool = True) -> list[Check]:
    checks = [conv_oracle_suite(trials=40 if quick else 200),
              hyena_oracle_suite(lengths=(2, 3, 8, 16, 32) if quick else range(2, 33))]
    checks += causality_suite(trials=10 if quick else 50)
    checks.append(block_gradient_suite(seeds=range(3 if quick else 20)))
    return checks
