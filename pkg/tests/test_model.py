import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hyseq import checkpoint as ckpt
from hyseq import tensor as T
from hyseq.errors import ConfigError, DimensionError
from hyseq.model import (ClassificationHead, DecoderStack, ModelConfig, forward_classify, param_count,
                         pool, sample_tokens)
from hyseq.tensor import Tensor, no_grad
from hyseq.tokenizer import VOCAB_SIZE
from hyseq.training import MarkovSource, TrainConfig, load_model, pretrain, save_training_state


def small(mixer="hyena", **kw):
    kw.setdefault("d_model", 16)
    kw.setdefault("max_len", 64)
    return DecoderStack(ModelConfig(mixer=mixer, **kw))


def test_config_invariants():
    for bad in ({"n_layers": 0}, {"d_model": 4}, {"vocab_size": 1}, {"mixer": "rnn"}, {"dtype": "float16"}):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)


def test_config_from_dict_round_trip():
    c = ModelConfig(n_layers=3, d_model=32, lean=True)
    assert ModelConfig.from_dict(c.to_dict()) == c
    assert ModelConfig.from_dict({"lean": "true", "d_model": "64"}).d_model == 64
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"depth": 3})


@pytest.mark.parametrize("mixer", ["hyena", "attention"])
def test_single_token_shape(mixer):
    m = small(mixer)
    with no_grad():
        assert m(np.array([[5]])).shape == (1, 1, VOCAB_SIZE)


def test_out_of_range_id():
    with pytest.raises(IndexError):
        small()(np.array([[VOCAB_SIZE]]))


def test_too_long_input():
    with pytest.raises(DimensionError):
        small(max_len=8)(np.zeros((1, 9), dtype=int))


def test_zero_head_gives_ln_vocab():
    m = small()
    m.head.weight.data[:] = 0
    ids = np.random.default_rng(0).integers(5, 9, (2, 20))
    with no_grad():
        loss = T.cross_entropy(m(ids), ids).item()
    assert loss == pytest.approx(np.log(VOCAB_SIZE), abs=1e-6)


@pytest.mark.parametrize("mixer", ["hyena", "attention"])
@given(t=st.integers(1, 31), seed=st.integers(0, 1000))
def test_stack_causality_property(mixer, t, seed):
    m = small(mixer, dtype="float64", max_len=32)
    m.eval()
    r = np.random.default_rng(seed)
    a = r.integers(0, VOCAB_SIZE, (1, 32))
    b = a.copy()
    b[:, t:] = r.integers(0, VOCAB_SIZE, (1, 32 - t))
    with no_grad():
        la, lb = m(a).data, m(b).data
    assert np.max(np.abs(la[:, :t] - lb[:, :t])) < 1e-6


def test_param_count_formula_and_scale():
    for mixer in ("hyena", "attention"):
        for cfg in (ModelConfig(mixer=mixer), ModelConfig(mixer=mixer, n_layers=3, d_model=40)):
            assert DecoderStack(cfg).num_parameters() == param_count(cfg)
    n = param_count(ModelConfig())
    assert n == 428_160
    assert abs(n - 0.44e6) / 0.44e6 < 0.2


def test_eval_mode_is_deterministic():
    m = small(embed_dropout=0.5, resid_dropout=0.5)
    ids = np.random.default_rng(0).integers(5, 9, (2, 16))
    m.eval()
    with no_grad():
        a, b = m(ids).data, m(ids).data
    np.testing.assert_array_equal(a, b)
    m.train()
    with no_grad():
        c = m(ids).data
    assert not np.array_equal(a, c)


def test_checkpoint_logits_bit_identical(tmp_path):
    m = small()
    m.eval()
    save_training_state(tmp_path / "m.ckpt", m, None, None, 0)
    m2, _ = load_model(tmp_path / "m.ckpt")
    m2.eval()
    ids = np.random.default_rng(0).integers(0, VOCAB_SIZE, (2, 30))
    with no_grad():
        np.testing.assert_array_equal(m(ids).data, m2(ids).data)
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()


def test_lean_recompute_gradients_match():
    ids = np.random.default_rng(0).integers(5, 9, (2, 24))
    grads = []
    for lean in (False, True):
        m = small(dtype="float64", lean=lean, recompute=lean, resid_dropout=0.2)
        T.backward(T.cross_entropy(m(ids), ids))
        grads.append([p.grad for p in m.parameters()])
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------------------
# pooling and heads

def test_pool_examples(rng):
    h = Tensor(rng.standard_normal((2, 1, 4)))
    np.testing.assert_array_equal(pool(h, "mean").data, pool(h, "last_token").data)
    c = Tensor(np.full((2, 5, 3), 1.5))
    np.testing.assert_allclose(pool(c).data, 1.5)
    x = rng.standard_normal((3, 7, 4))
    ref = np.zeros((3, 4))
    for t in range(7):
        ref += x[:, t]
    assert np.max(np.abs(pool(Tensor(x)).data - ref / 7)) < 1e-6
    np.testing.assert_array_equal(pool(Tensor(x), "last_token", lengths=[3, 7, 1]).data,
                                  x[[0, 1, 2], [2, 6, 0]])
    with pytest.raises(ValueError):
        pool(Tensor(x), "max")


def test_zero_head_logits():
    m = small()
    head = ClassificationHead(16, 2, zero=True)
    head.proj.bias.data[:] = 0
    with no_grad():
        out = forward_classify(m, head, np.array([[5, 6, 7]])).data
    np.testing.assert_array_equal(out, [[0.0, 0.0]])


def test_finetune_gradients_flow_to_head_and_backbone():
    m = small()
    head = ClassificationHead(16, 2)
    loss = T.cross_entropy(forward_classify(m, head, np.array([[5, 6, 7, 8], [8, 7, 6, 5]])), [0, 1])
    T.backward(loss)
    assert np.abs(head.proj.weight.grad).sum() > 0
    assert np.abs(m.layers[0].mixer.proj_v.weight.grad).sum() > 0


def test_frozen_backbone_has_no_grads():
    m = small()
    m.requires_grad_(False)
    head = ClassificationHead(16, 2)
    T.backward(T.cross_entropy(forward_classify(m, head, np.array([[5, 6, 7, 8]])), [1]))
    assert all(p.grad is None for p in m.parameters())
    assert head.proj.weight.grad is not None


def test_standardized_head_train_and_eval(rng):
    head = ClassificationHead(3, 2, np.random.default_rng(0), standardize=True, momentum=1.0)
    x = rng.standard_normal((16, 3)) * 0.01 + 5
    y = head(Tensor(x.astype(np.float32))).data
    z = (x - x.mean(0)) / np.sqrt(x.var(0) + 1e-5)
    np.testing.assert_allclose(y, z @ head.proj.weight.data + head.proj.bias.data, rtol=1e-4, atol=1e-4)
    head.eval()
    np.testing.assert_allclose(head.running_mean, x.mean(0), rtol=1e-5)
    sd = head.state_dict()
    h2 = ClassificationHead(3, 2, np.random.default_rng(9), standardize=True)
    h2.load_state_dict(sd)
    h2.eval()
    np.testing.assert_array_equal(h2(Tensor(x.astype(np.float32))).data, head(Tensor(x.astype(np.float32))).data)


# ---------------------------------------------------------------------------
# sampling

def test_sampling_is_seeded_and_greedy_limit():
    m = small()
    a = sample_tokens(m, [5, 6], 10, 1.0, np.random.default_rng(3))
    b = sample_tokens(m, [5, 6], 10, 1.0, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    assert len(a) == 12 and list(a[:2]) == [5, 6]
    cold = sample_tokens(m, [5, 6], 5, 1e-6, np.random.default_rng(0))
    ids = [5, 6]
    m.eval()
    with no_grad():
        for _ in range(5):
            ids.append(int(np.argmax(m(np.array([ids])).data[0, -1])))
    np.testing.assert_array_equal(cold, ids)
    with pytest.raises(ValueError):
        sample_tokens(m, [5], 3, 0.0)


class _Repeat(MarkovSource):
    """Deterministic ACGT repetition with a random phase."""

    def __init__(self):
        pass

    def batch(self, rng, n, L):
        phase = rng.integers(0, 4, size=(n, 1))
        seq = 5 + (phase + np.arange(L + 1)[None, :]) % 4
        return seq[:, :-1], seq[:, 1:]


@pytest.mark.slow
def test_trained_model_emits_repeating_pattern():
    m = DecoderStack(ModelConfig(d_model=32, max_len=64, embed_dropout=0.0))
    tc = TrainConfig(steps=300, batch_size=8, seq_len=64, lr=3e-3, warmup_steps=10, eval_every=0,
                     log_every=0, weight_decay=0.0)
    pretrain(m, _Repeat(), tc)
    hits = []
    r = np.random.default_rng(0)
    for _ in range(6):
        out = sample_tokens(m, [5, 6, 7, 8], 40, 1.0, r)
        # per token: each sampled base is the successor of the one before it
        hits.append(out[4:] == 5 + (out[3:-1] - 4) % 4)
    assert np.concatenate(hits).mean() > 0.95
