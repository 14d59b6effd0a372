import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hyseq import tensor as T
from hyseq import tokenizer as tok
from hyseq.adaptation import (FewShotPrompt, SoftPrompt, build_few_shot_prompt, few_shot_accuracy,
                              instruction_tune, load_soft_prompt, param_hash, parse_few_shot_prompt,
                              predict_letters, save_soft_prompt, soft_prompt_forward, tune_soft_prompt)
from hyseq.data import gen_composition_classification
from hyseq.errors import CapacityError, DataError, FormatError
from hyseq.model import DecoderStack, ModelConfig
from hyseq.tensor import no_grad
from hyseq.training import TrainConfig


def tiny(max_len=64, **kw):
    m = DecoderStack(ModelConfig(d_model=16, max_len=max_len, embed_dropout=0.0, **kw))
    m.eval()
    return m


def test_letters():
    assert SoftPrompt(2, 16).letters == (tok.A, tok.N)
    assert SoftPrompt(2, 16, 3).letters == (tok.A, tok.N, tok.G)
    with pytest.raises(ValueError):
        SoftPrompt(2, 16, 4)


def test_empty_prompt_is_zero_shot_readout():
    m = tiny()
    ids = np.array([[5, 6, 7, 8]])
    with no_grad():
        got = soft_prompt_forward(m, SoftPrompt(0, 16), ids).data
        full = m(np.array([[5, 6, 7, 8, tok.SEP]])).data[:, -1]
    np.testing.assert_allclose(got, full[:, [tok.A, tok.N]], atol=1e-6)


def test_capacity_error():
    m = tiny(max_len=20)
    with pytest.raises(CapacityError):
        soft_prompt_forward(m, SoftPrompt(8, 16), np.full((1, 12), 5))
    soft_prompt_forward(m, SoftPrompt(7, 16), np.full((1, 12), 5))


def test_gradients_reach_theta_only():
    m = tiny()
    m.requires_grad_(False)
    sp = SoftPrompt(4, 16)
    T.backward(T.cross_entropy(soft_prompt_forward(m, sp, np.array([[5, 6, 7], [8, 7, 6]])), [0, 1]))
    assert np.abs(sp.theta.grad).sum() > 0
    assert all(p.grad is None for p in m.parameters())


def test_readout_invariant_to_non_letter_shift():
    m = tiny()
    sp = SoftPrompt(3, 16, rng=np.random.default_rng(1))
    x = np.random.default_rng(0).integers(5, 9, (8, 10))
    before = predict_letters(m, sp, x)
    # the LM head has no bias, so move every non-letter logit by rewriting its column
    m.head.weight.data[:, [0, 1, 2, 3, 4, 6, 7, 8]] = 50.0
    np.testing.assert_array_equal(predict_letters(m, sp, x), before)


def test_tuning_keeps_model_hash_and_is_deterministic():
    rng = np.random.default_rng(0)
    train = gen_composition_classification(32, 16, rng)
    val = gen_composition_classification(16, 16, rng)
    outs = []
    for _ in range(2):
        m = tiny()
        h = param_hash(m)
        sp = SoftPrompt(4, 16, rng=np.random.default_rng(0))
        r = tune_soft_prompt(m, sp, train, val, epochs=3, patience=3, batch_size=8)
        assert r.hash_before == r.hash_after == h == param_hash(m)
        outs.append((r.val_acc, sp.theta.data.tobytes()))
    assert outs[0] == outs[1]
    r0 = tune_soft_prompt(tiny(), SoftPrompt(0, 16), train, val)
    assert r0.epochs == 0 and r0.best_epoch == 0


def test_soft_prompt_file(tmp_path):
    sp = SoftPrompt(5, 16, rng=np.random.default_rng(3))
    save_soft_prompt(tmp_path / "p.ckpt", sp, "ab" * 32)
    back = load_soft_prompt(tmp_path / "p.ckpt", "ab" * 32)
    assert back.theta.data.tobytes() == sp.theta.data.tobytes()
    with pytest.raises(FormatError):
        load_soft_prompt(tmp_path / "p.ckpt", "cd" * 32)


# ---------------------------------------------------------------------------
# few-shot prompts

def test_prompt_examples():
    fp = FewShotPrompt(2, 0)
    np.testing.assert_array_equal(build_few_shot_prompt(fp, {}, [5, 6]), [5, 6, tok.SEP])
    fp = FewShotPrompt(2, 1)
    ids = build_few_shot_prompt(fp, {0: [[5, 5, 5, 5]], 1: [[6, 6, 6, 6]]}, [7, 7, 7, 7])
    assert len(ids) == 19 == fp.length(4, 4)
    assert tok.decode(ids) == "AAAA|A|CCCC|N|GGGG|"


@given(n=st.sampled_from([2, 3]), k=st.integers(0, 3), td=st.integers(1, 8), tq=st.integers(0, 8),
       seed=st.integers(0, 1000))
def test_prompt_length_and_round_trip(n, k, td, tq, seed):
    r = np.random.default_rng(seed)
    fp = FewShotPrompt(n, k)
    demos = {c: [r.integers(5, 10, td) for _ in range(k)] for c in range(n)}
    q = r.integers(5, 10, tq)
    ids = build_few_shot_prompt(fp, demos, q)
    assert len(ids) == fp.length(td, tq)
    got, labels, query = parse_few_shot_prompt(ids, fp)
    want = [(demos[c][j], c) for j in range(k) for c in range(n)]
    assert labels == [c for _, c in want]
    for g, (d, _) in zip(got, want):
        np.testing.assert_array_equal(g, d)
    np.testing.assert_array_equal(query, q)


def test_prompt_errors():
    fp = FewShotPrompt(2, 1, max_len=10)
    with pytest.raises(DataError):
        build_few_shot_prompt(fp, {0: [[5]]}, [5])
    with pytest.raises(DataError):
        build_few_shot_prompt(FewShotPrompt(2, 1), {0: [[5]], 1: [[5, 6]]}, [5])
    with pytest.raises(DataError):
        build_few_shot_prompt(FewShotPrompt(2, 1), {0: [[1]], 1: [[5]]}, [5])
    with pytest.raises(CapacityError):
        build_few_shot_prompt(fp, {0: [[5, 5]], 1: [[6, 6]]}, [5, 5])
    with pytest.raises(FormatError):
        parse_few_shot_prompt([5, 6], fp)


def test_instruction_tune_runs_and_is_deterministic():
    rng = np.random.default_rng(0)
    pool = gen_composition_classification(16, 8, rng)
    tune = gen_composition_classification(16, 8, rng)
    val = gen_composition_classification(8, 8, rng)
    fp = FewShotPrompt(2, 1)
    cfg = TrainConfig(lr=1e-3, batch_size=8, warmup_steps=0)
    a = instruction_tune(tiny(), fp, pool, tune, val, cfg, n=16, epochs=2)
    b = instruction_tune(tiny(), fp, pool, tune, val, cfg, n=16, epochs=2)
    assert a.steps == 4 and a.val_acc == b.val_acc
    assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]
    assert 0 <= few_shot_accuracy(tiny(), fp, pool, val) <= 1


def test_task_code_source_layout():
    from hyseq.adaptation import TaskCodeSource, prompt_task
    src = TaskCodeSource(p_plain=0.5)
    x, y = src.batch(np.random.default_rng(0), 400, 48)
    np.testing.assert_array_equal(x[:, 1:], y[:, :-1])
    assert (x[:, -1] == tok.SEP).all() and np.isin(y[:, -1], [tok.A, tok.N]).all()
    coded = (x[:, :8] == src.code).all(1)
    assert 150 < coded.sum() < 250
    body = x[:, 8:-1]
    at = np.isin(body, [tok.A, tok.T]).mean(1) > 0.5
    pu = np.isin(body, [tok.A, tok.G]).mean(1) > 0.5
    says_a = y[:, -1] == tok.A
    # coded rows answer the A/T question, the rest answer the purine question
    assert (says_a[coded] == at[coded]).mean() > 0.95
    assert (says_a[~coded] == pu[~coded]).mean() > 0.95
    labels, ids = prompt_task(200, 64, np.random.default_rng(1))
    assert ((np.isin(ids, [tok.A, tok.T]).mean(1) > 0.5) == (labels == 0)).mean() > 0.95
    with pytest.raises(CapacityError):
        src.batch(np.random.default_rng(0), 2, 8)
