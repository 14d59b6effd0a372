"""Runtime scaling benchmark for the two mixers, plus a numba-vs-numpy kernel comparison."""
from __future__ import annotations

import csv
import gc
import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import _kernels as K
from . import tensor as T
from .errors import DataError
from .model import DecoderStack, ModelConfig

BENCH_COLUMNS = ("mixer", "length", "batch", "width", "layers", "forward_ms", "fwd_bwd_ms",
                 "peak_bytes", "reps", "threads", "kernels")


@dataclass
class BenchRow:
    mixer: str
    length: int
    batch: int
    width: int
    layers: int
    forward_ms: float
    fwd_bwd_ms: float
    peak_bytes: int
    reps: int
    threads: int = 1
    kernels: str = K.BACKEND


@dataclass
class BenchResult:
    rows: list

    def for_mixer(self, mixer: str) -> list:
        return [r for r in self.rows if r.mixer == mixer]

    def time_at(self, mixer: str, length: int, column: str = "fwd_bwd_ms") -> float:
        for r in self.rows:
            if r.mixer == mixer and r.length == length:
                return float(getattr(r, column))
        raise KeyError(f"no {mixer} row at L={length}")


def set_threads(n: int) -> int:
    """Thread count for numba kernels; returns the count in effect."""
    if n < 1:
        raise ValueError("thread count must be >= 1")
    if K.HAS_NUMBA:
        import numba
        n = min(n, numba.config.NUMBA_NUM_THREADS)
        numba.set_num_threads(n)
    return n


def _one(model, tokens):
    t0 = time.perf_counter()
    loss = T.cross_entropy(model(tokens), tokens)
    t1 = time.perf_counter()
    T.backward(loss)
    t2 = time.perf_counter()
    return (t1 - t0) * 1e3, (t2 - t0) * 1e3


def bench_one(mixer: str, L: int, batch: int = 1, width: int = 128, layers: int = 2,
              reps: int = 5, warmup: int = 2, lean: bool = True, seed: int = 0,
              threads: int = 1) -> BenchRow:
    """Median forward and forward+backward wall time over ``reps`` timed runs."""
    if reps < 1 or warmup < 0:
        raise ValueError("reps must be >= 1 and warmup >= 0")
    cfg = ModelConfig(n_layers=layers, d_model=width, mixer=mixer, max_len=L, embed_dropout=0.0,
                      lean=lean, recompute=lean, seed=seed)
    model = DecoderStack(cfg)
    tokens = np.random.default_rng(seed).integers(5, 9, size=(batch, L))
    for _ in range(warmup):
        _one(model, tokens)
        model.zero_grad()
    fw, fb = [], []
    for _ in range(reps):
        gc.collect()
        a, b = _one(model, tokens)
        model.zero_grad()
        fw.append(a)
        fb.append(b)
    # process high-water mark: an upper estimate when rows run in increasing size
    peak = peak_rss_bytes()
    return BenchRow(mixer, L, batch, width, layers, float(np.median(fw)), float(np.median(fb)),
                    int(peak), reps, threads)


def run_bench(plan: dict, batch: int = 1, width: int = 128, layers: int = 2, reps: int = 5,
              warmup: int = 2, lean: bool = True, seed: int = 0, threads: int = 1,
              on_row=None) -> BenchResult:
    """``plan`` maps mixer name to the lengths to time."""
    threads = set_threads(threads)
    rows = []
    for mixer, lengths in plan.items():
        for L in lengths:
            row = bench_one(mixer, L, batch, width, layers, reps, warmup, lean, seed, threads=threads)
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return BenchResult(rows)


def write_bench_csv(path, result: BenchResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for r in result.rows:
            w.writerow(asdict(r))


def read_bench_csv(path) -> BenchResult:
    types = {f.name: f.type for f in fields(BenchRow)}
    conv = {"int": int, "float": float, "str": str}
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        missing = set(BENCH_COLUMNS) - set(rd.fieldnames or ())
        if missing:
            raise DataError(f"bench file lacks columns {sorted(missing)}")
        for rec in rd:
            try:
                rows.append(BenchRow(**{k: conv[types[k]](rec[k]) for k in BENCH_COLUMNS}))
            except (ValueError, KeyError) as e:
                raise DataError(f"bad bench row {rec}: {e}") from None
    return BenchResult(rows)


def scaling_fit(result, mixer: str | None = None, column: str = "fwd_bwd_ms") -> float:
    """Least-squares slope of log(time) against log(L).

    ``result`` is a BenchResult, a list of rows, or a list of (L, time) pairs.
    Needs at least 4 distinct lengths spanning a factor of 16 or more.
    """
    rows = result.rows if isinstance(result, BenchResult) else list(result)
    if rows and not isinstance(rows[0], (tuple, list)):
        if mixer is not None:
            rows = [r for r in rows if r.mixer == mixer]
        pts = [(r.length, getattr(r, column)) for r in rows]
    else:
        pts = [(float(a), float(b)) for a, b in rows]
    Ls = sorted({p[0] for p in pts})
    if len(Ls) < 4:
        raise DataError(f"scaling fit needs >= 4 distinct lengths, got {len(Ls)}")
    if Ls[-1] < 16 * Ls[0]:
        raise DataError(f"lengths span {Ls[-1] / Ls[0]:.1f}x, need >= 16x")
    if any(t <= 0 for _, t in pts):
        raise DataError("times must be positive")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


# ---------------------------------------------------------------------------
# kernel backends

def _time(fn, reps: int) -> float:
    fn()
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts)) * 1e3


def compare_kernels(reps: int = 5, seed: int = 0) -> list[dict]:
    """Time each numba kernel against its numpy twin on representative shapes.

    The numpy FFT twin is ``numpy.fft`` (pocketfft); the other twins are
    vectorized numpy. Also reports the max abs difference between outputs.
    """
    rng = np.random.default_rng(seed)
    out = []
    a = (rng.standard_normal((128, 1 << 14)) + 1j * rng.standard_normal((128, 1 << 14))).astype(np.complex64)
    x = rng.standard_normal((1, 1 << 14, 128)).astype(np.float32)
    w = rng.standard_normal((128, 3)).astype(np.float32)
    b = rng.standard_normal(128).astype(np.float32)
    g = rng.standard_normal(x.shape).astype(np.float32)
    t = np.tanh(x)
    cases = {
        "fft_c2c[128x16384]": (lambda: K.fft_numba(a), lambda: K.fft_numpy(a)),
        "short_conv_fwd[16384x128]": (lambda: K.short_conv_fwd_numba(x, w, b),
                                      lambda: K.short_conv_fwd_numpy(x, w, b)),
        "short_conv_bwd[16384x128]": (lambda: K.short_conv_bwd_numba(g, x, w)[0],
                                      lambda: K.short_conv_bwd_numpy(g, x, w)[0]),
        "gelu_bwd[16384x128]": (lambda: K.gelu_bwd_numba(g, x, t), lambda: K.gelu_bwd_numpy(g, x, t)),
    }
    for name, (f_nb, f_np) in cases.items():
        if not K.HAS_NUMBA:  # pragma: no cover
            f_nb = f_np
        diff = float(np.max(np.abs(np.asarray(f_nb()) - np.asarray(f_np()))))
        out.append({"kernel": name, "numba_ms": _time(f_nb, reps), "numpy_ms": _time(f_np, reps),
                    "max_abs_diff": diff})
    for r in out:
        r["speedup"] = r["numpy_ms"] / r["numba_ms"] if r["numba_ms"] > 0 else math.nan
    return out


def write_kernel_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=("kernel", "numba_ms", "numpy_ms", "speedup", "max_abs_diff"))
        w.writeheader()
        w.writerows(rows)


def default_plan(mixer: str, lengths=None) -> dict:
    hy = [4096, 16384, 65536, 262144]
    at = [1024, 2048, 4096, 8192, 16384]
    if mixer not in ("hyena", "attention", "both"):
        raise ValueError(f"mixer must be hyena, attention or both, got {mixer!r}")
    plan = {}
    if mixer in ("hyena", "both"):
        plan["hyena"] = list(lengths) if lengths else hy
    if mixer in ("attention", "both"):
        plan["attention"] = list(lengths) if lengths else at
    return plan


def peak_rss_bytes() -> int:
    try:
        import resource
        return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss) * 1024
    except Exception:  # pragma: no cover - non-posix
        return 0

