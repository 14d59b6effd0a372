import numpy as np
import pytest

from hyseq import cli, conv, hyena
from hyseq import checkpoint as ckpt
from hyseq import data as gd
from hyseq import tensor as T
from hyseq.tensor import Tensor
from hyseq.training import read_metrics

SMALL = """[model]
d_model = 16
max_len = 64
[train]
steps = 4
batch_size = 4
seq_len = 32
warmup_steps = 1
eval_every = 2
val_sequences = 4
log_every = 1
epochs = 1
[data]
source = markov
n_train = 16
n_val = 8
[adapt]
n_prompt = 4
epochs = 1
batch_size = 8
[bench]
reps = 1
warmup = 0
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text(SMALL)
    return str(p)


def test_usage_errors(cfg, tmp_path, capsys):
    assert cli.main([]) == 2
    assert cli.main(["fly"]) == 2
    assert cli.main(["pretrain", "--config", cfg]) == 2                       # no --out
    assert cli.main(["pretrain", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nwidth = 3\n")
    assert cli.main(["pretrain", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["bench", "--lengths", "x..y", "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_runtime_error_exit_one(cfg, tmp_path):
    assert cli.main(["pretrain", "--config", cfg, "--data", str(tmp_path / "missing.fa"),
                     "--out", str(tmp_path / "o")]) == 1
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"junk")
    assert cli.main(["sample", "--ckpt", str(junk)]) == 1


def test_pretrain_fasta_then_sample(cfg, tmp_path, capsys):
    r = np.random.default_rng(0)
    gd.write_fasta(tmp_path / "g.fa", {c: "".join(r.choice(list("ACGT"), 3000)) for c in ("chr1", "chr2")})
    out = tmp_path / "run"
    assert cli.main(["pretrain", "--config", cfg, "--data", str(tmp_path / "g.fa"), "--out", str(out)]) == 0
    assert (out / "metrics.csv").exists() and (out / "model.ckpt").exists()
    assert ckpt.load(out / "model.ckpt").config_text == SMALL
    assert cli.main(["sample", "--ckpt", str(out / "model.ckpt"), "--prompt", "ACG", "-n", "10",
                     "--out", str(out)]) == 0
    text = (out / "sample.txt").read_text().strip()
    assert len(text) == 13 and text.startswith("ACG")
    assert cli.main(["sample", "--ckpt", str(out / "model.ckpt"), "-n", "100"]) == 2


def test_seed_precedence(cfg, tmp_path, monkeypatch):
    def run(name, *extra):
        assert cli.main(["pretrain", "--config", cfg, "--out", str(tmp_path / name), *extra]) == 0
        return [r["loss"] for r in read_metrics(tmp_path / name / "metrics.csv")]

    base = run("a")
    monkeypatch.setenv("HYSEQ_SEED", "5")
    env5 = run("b")
    flag5 = run("c", "--seed", "5")
    assert env5 != base and env5 == flag5
    assert run("d", "--seed", "0") == base


def test_finetune_and_softprompt(cfg, tmp_path, capsys):
    ft = tmp_path / "ft"
    assert cli.main(["finetune", "--config", cfg, "--out", str(ft)]) == 0
    assert (ft / "metrics.csv").exists() and (ft / "model.ckpt").exists()
    pre = tmp_path / "pre"
    assert cli.main(["pretrain", "--config", cfg, "--out", str(pre)]) == 0
    sp = tmp_path / "sp"
    assert cli.main(["softprompt", "--config", cfg, "--ckpt", str(pre / "model.ckpt"), "--out", str(sp)]) == 0
    assert (sp / "prompt.ckpt").exists() and (sp / "metrics.csv").exists()
    assert "params_unchanged=True" in capsys.readouterr().out


def test_finetune_labeled_files(cfg, tmp_path):
    y, x = gd.gen_motif_classification(16, 24, np.random.default_rng(0))
    gd.write_labeled(tmp_path / "tr.tsv", y, x)
    gd.write_labeled(tmp_path / "va.tsv", y[:8], x[:8])
    assert cli.main(["finetune", "--config", cfg, "--data", str(tmp_path / "tr.tsv"), "--val",
                     str(tmp_path / "va.tsv"), "--frozen", "--out", str(tmp_path / "o")]) == 0
    assert cli.main(["finetune", "--config", cfg, "--data", str(tmp_path / "tr.tsv"),
                     "--out", str(tmp_path / "o")]) == 2


def test_bench_writes_csv(cfg, tmp_path, capsys):
    out = tmp_path / "b"
    assert cli.main(["bench", "--config", cfg, "--mixer", "both", "--lengths", "64..1024", "--out", str(out)]) == 0
    rows = (out / "bench.csv").read_text().splitlines()
    assert rows[0].startswith("mixer,length") and len(rows) == 1 + 2 * 5
    assert "hyena exponent" in capsys.readouterr().out


def test_selftest_passes_and_catches_truncated_filter(monkeypatch, capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 7

    real = conv.causal_conv_fft

    def truncated(x, h, bias=None):
        # keep only the first 4 taps of the filter
        data = h.data if isinstance(h, Tensor) else np.asarray(h)
        mask = np.zeros(data.shape, dtype=data.dtype)
        mask[..., :4] = 1
        h = T.mul(h, Tensor(mask)) if isinstance(h, Tensor) else data * mask
        return real(x, h, bias)

    monkeypatch.setattr(conv, "causal_conv_fft", truncated)
    monkeypatch.setattr(hyena, "causal_conv_fft", truncated)
    assert cli.main(["selftest"]) == 1
    assert "FAIL" in capsys.readouterr().out
