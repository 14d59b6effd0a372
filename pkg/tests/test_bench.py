import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hyseq import bench as B
from hyseq.errors import DataError


def _rows(mixer, Ls, f):
    return [B.BenchRow(mixer, L, 1, 16, 2, f(L) / 2, f(L), 1000, 5) for L in Ls]


def test_quadratic_rows_give_exponent_two():
    Ls = [1024, 2048, 4096, 8192, 16384]
    res = B.BenchResult(_rows("attention", Ls, lambda L: 1e-6 * L ** 2) + _rows("hyena", Ls, lambda L: 1e-3 * L))
    assert B.scaling_fit(res, "attention") == pytest.approx(2.0, abs=0.05)
    assert B.scaling_fit(res, "hyena") == pytest.approx(1.0, abs=0.05)
    assert B.scaling_fit([(L, L ** 2) for L in Ls]) == pytest.approx(2.0, abs=0.05)


@given(p=st.floats(0.5, 3.0), c=st.floats(1e-6, 1e3), noise=st.integers(0, 1000))
def test_power_law_recovered(p, c, noise):
    r = np.random.default_rng(noise)
    pts = [(L, c * L ** p * np.exp(r.normal(0, 0.01))) for L in (256, 1024, 4096, 16384)]
    assert B.scaling_fit(pts) == pytest.approx(p, abs=0.05)


def test_fit_rejects_thin_data():
    with pytest.raises(DataError):
        B.scaling_fit([(1024, 1.0), (2048, 2.0), (16384, 3.0)])
    with pytest.raises(DataError):
        B.scaling_fit([(1024, 1.0), (2048, 2.0), (4096, 3.0), (8192, 4.0)])
    with pytest.raises(DataError):
        B.scaling_fit([(1, 1.0), (2, 2.0), (4, 0.0), (16, 4.0)])


def test_csv_round_trip(tmp_path):
    Ls = [64, 256, 1024, 4096]
    res = B.BenchResult(_rows("hyena", Ls, lambda L: 0.01 * L))
    B.write_bench_csv(tmp_path / "b.csv", res)
    back = B.read_bench_csv(tmp_path / "b.csv")
    assert back.rows == res.rows
    assert B.scaling_fit(back, "hyena") == pytest.approx(B.scaling_fit(res, "hyena"))
    (tmp_path / "bad.csv").write_text("mixer,length\nhyena,64\n")
    with pytest.raises(DataError):
        B.read_bench_csv(tmp_path / "bad.csv")


def test_bench_one_small():
    row = B.bench_one("hyena", 128, width=16, reps=5, warmup=2)
    assert row.reps == 5 and row.length == 128 and row.width == 16
    assert 0 < row.forward_ms <= row.fwd_bwd_ms
    assert row.peak_bytes > 0
    with pytest.raises(ValueError):
        B.bench_one("hyena", 16, reps=0)


def test_plan_and_lookup():
    plan = B.default_plan("both")
    assert plan["hyena"][0] == 4096 and plan["hyena"][-1] == 262144
    assert plan["attention"] == [1024, 2048, 4096, 8192, 16384]
    assert B.default_plan("hyena", [64, 128]) == {"hyena": [64, 128]}
    with pytest.raises(ValueError):
        B.default_plan("rnn")
    res = B.BenchResult(_rows("hyena", [64], lambda L: 3.0))
    assert res.time_at("hyena", 64) == 3.0
    with pytest.raises(KeyError):
        res.time_at("attention", 64)
