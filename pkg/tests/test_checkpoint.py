import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hyseq import checkpoint as ckpt
from hyseq.errors import FormatError

DTYPES = [np.float32, np.float64, np.int64, np.uint8, np.int32, np.complex64, np.complex128, np.bool_]


@given(arrays=st.lists(st.sampled_from(DTYPES).flatmap(
    lambda dt: hnp.arrays(dt, hnp.array_shapes(min_dims=0, max_dims=3, max_side=5))), max_size=5),
    text=st.text(max_size=50))
def test_round_trip_bit_identical(arrays, text):
    ck = ckpt.Checkpoint({f"a{i}": a for i, a in enumerate(arrays)}, text, {"step": 3, "x": [1, 2]})
    back = ckpt.from_bytes(ckpt.to_bytes(ck))
    assert back.config_text == text and back.meta == ck.meta
    for k, a in ck.arrays.items():
        b = back.arrays[k]
        assert b.dtype == a.dtype and b.shape == a.shape and b.tobytes() == a.tobytes()


def test_save_is_reproducible(tmp_path):
    ck = ckpt.Checkpoint({"w": np.arange(6.0).reshape(2, 3)}, "[model]\n", {"a": 1})
    h1 = ckpt.save(tmp_path / "a", ck)
    h2 = ckpt.save(tmp_path / "b", ck)
    assert h1 == h2 == ckpt.file_sha256(tmp_path / "a")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_corruption_detected(tmp_path):
    buf = bytearray(ckpt.to_bytes(ckpt.Checkpoint({"w": np.ones(4)})))
    with pytest.raises(FormatError):
        ckpt.from_bytes(bytes(buf[:-1]))
    buf[20] ^= 1
    with pytest.raises(FormatError):
        ckpt.from_bytes(bytes(buf))
    with pytest.raises(FormatError):
        ckpt.from_bytes(b"NOTACKPT" + bytes(40))


def test_unsupported_dtype():
    with pytest.raises(FormatError):
        ckpt.to_bytes(ckpt.Checkpoint({"s": np.array(["x"])}))


def test_rng_state_round_trip():
    r = np.random.default_rng(5)
    r.random(7)
    r2 = ckpt.rng_from_state(ckpt.rng_state(r))
    np.testing.assert_array_equal(r.random(10), r2.random(10))
