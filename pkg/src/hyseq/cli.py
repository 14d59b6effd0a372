"""Command-line entry point: ``hyseq <command> [flags]``.

Exit status is 0 on success, 2 for usage or configuration errors and 1 for
failures while running.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import bench as B
from . import checkpoint as ckpt
from . import data as gd
from . import tokenizer as tok
from .config import RunConfig, load_config, parse_lengths
from .errors import ConfigError, DataError, FormatError
from .model import ClassificationHead, DecoderStack, sample_tokens

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 as well; keep the message on stderr
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--out", help="output directory (metrics.csv, bench.csv, model.ckpt)")
    common.add_argument("--seed", type=int, help="seed; overrides HYSEQ_SEED and the config")
    common.add_argument("--data", help="FASTA file (pretrain) or label<TAB>sequence file (finetune, softprompt)")
    common.add_argument("--device-threads", type=int, default=1, help="threads for numba kernels")

    p = _Parser(prog="hyseq", description="Long-context nucleotide sequence models")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    sp = sub.add_parser("pretrain", parents=[common], help="next-token pretraining")
    sp.add_argument("--mixer", choices=("hyena", "attention"))
    sp.add_argument("--resume", help="checkpoint to continue from")

    sp = sub.add_parser("finetune", parents=[common], help="sequence classification")
    sp.add_argument("--ckpt", help="pretrained checkpoint (fresh weights when omitted)")
    sp.add_argument("--val", help="validation label<TAB>sequence file")
    sp.add_argument("--frozen", action="store_true", help="train the head only")
    sp.add_argument("--mixer", choices=("hyena", "attention"))

    sp = sub.add_parser("softprompt", parents=[common], help="tune soft prompt vectors on a frozen model")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--val", help="validation label<TAB>sequence file")

    sp = sub.add_parser("sample", parents=[common], help="autoregressive sampling")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--prompt", default="A")
    sp.add_argument("-n", "--num", type=int, default=64)
    sp.add_argument("--temperature", type=float, default=1.0)

    sp = sub.add_parser("bench", parents=[common], help="runtime scaling benchmark")
    sp.add_argument("--lengths", help="e.g. 1024..65536 or 1k,4k,16k")
    sp.add_argument("--mixer", choices=("hyena", "attention", "both"), default=None)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--kernels", action="store_true", help="also compare numba and numpy kernels")

    sp = sub.add_parser("selftest", parents=[common], help="oracle, causality and gradient checks")
    sp.add_argument("--full", action="store_true", help="acceptance-size trial counts")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.device_threads is not None and args.device_threads < 1:
        raise UsageError("--device-threads must be >= 1")
    return cfg


def _out(args, required: bool = True) -> str | None:
    if args.out is None:
        if required:
            raise UsageError(f"{args.command} needs --out")
        return None
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _labeled(path) -> tuple[np.ndarray, np.ndarray]:
    labels, seqs = gd.read_labeled(path)
    if not seqs:
        raise DataError(f"{path} has no records")
    return labels, gd.encode_batch(seqs)


# ---------------------------------------------------------------------------
# commands

def cmd_pretrain(args) -> int:
    from dataclasses import replace

    from .training import CompositionSource, CopySource, GenomeSource, MarkovSource, pretrain
    cfg = _config(args)
    out = _out(args)
    mcfg = cfg.model if args.mixer is None else replace(cfg.model, mixer=args.mixer)
    mcfg = replace(mcfg, max_len=max(mcfg.max_len, cfg.train.seq_len))
    B.set_threads(args.device_threads)
    src_kind = "fasta" if args.data else cfg.data.source
    if src_kind == "fasta":
        path = args.data or cfg.data.path
        if not path:
            raise UsageError("fasta source needs --data or data.path")
        store = gd.parse_fasta(path)
        test = cfg.data.test_list
        train_chroms = [c for c in store.names if c not in test]
        if not train_chroms:
            raise ConfigError("every chromosome is held out for testing")
        source = GenomeSource(store, train_chroms)
    elif src_kind == "markov":
        source = MarkovSource(gd.order1_chain(cfg.data.entropy, seed=cfg.data.seed), 1)
    elif src_kind == "copy":
        source = CopySource(cfg.data.horizon)
    elif src_kind == "composition":
        source = CompositionSource()
    elif src_kind == "taskcode":
        from .adaptation import TaskCodeSource
        source = TaskCodeSource()
    else:
        raise ConfigError(f"data.source {src_kind!r} cannot be used for pretraining")
    model = DecoderStack(mcfg)
    res = pretrain(model, source, cfg.train, out_dir=out, config_text=cfg.text, resume=args.resume)
    print(f"steps={res.steps} tokens={res.tokens} val_loss={res.val_loss:.4f} val_ppl={res.val_ppl:.4f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from dataclasses import replace

    from .training import finetune, load_model
    cfg = _config(args)
    out = _out(args)
    B.set_threads(args.device_threads)
    if args.data:
        train = _labeled(args.data)
        if not args.val:
            raise UsageError("--data needs a matching --val file")
        val = _labeled(args.val)
        L = max(train[1].shape[1], val[1].shape[1])
        train = (train[0], gd.encode_batch([tok.decode(r) for r in train[1]], L))
        val = (val[0], gd.encode_batch([tok.decode(r) for r in val[1]], L))
    else:
        d = cfg.data
        task = gd.gen_markov_species(d.n_species, d.separation, seed=d.seed)
        rng = np.random.default_rng(d.seed + 1)
        train = task.sample(d.n_train, cfg.train.seq_len, rng)
        val = task.sample(d.n_val, cfg.train.seq_len, rng)
    n_classes = int(max(train[0].max(), val[0].max())) + 1
    if args.ckpt:
        model, _ = load_model(args.ckpt)
    else:
        mcfg = cfg.model if args.mixer is None else replace(cfg.model, mixer=args.mixer)
        model = DecoderStack(replace(mcfg, max_len=max(mcfg.max_len, train[1].shape[1])))
    head = ClassificationHead(model.cfg.d_model, n_classes, np.random.default_rng(cfg.train.seed),
                              standardize=True)
    res = finetune(model, head, train, val, cfg.train, frozen_backbone=args.frozen, out_dir=out,
                   config_text=cfg.text)
    print(f"steps={res.steps} val_acc={res.val_acc:.4f}")
    return EXIT_OK


def cmd_softprompt(args) -> int:
    from .adaptation import SoftPrompt, prompt_task, save_soft_prompt, tune_soft_prompt
    from .training import load_model
    cfg = _config(args)
    out = _out(args)
    a = cfg.adapt
    model, _ = load_model(args.ckpt)
    base = ckpt.file_sha256(args.ckpt)
    if args.data:
        if not args.val:
            raise UsageError("--data needs a matching --val file")
        train, val = _labeled(args.data), _labeled(args.val)
    else:
        rng = np.random.default_rng(cfg.data.seed + 1)
        L = min(cfg.train.seq_len, model.cfg.max_len - a.n_prompt - 1)
        train = prompt_task(cfg.data.n_train, L, rng)
        val = prompt_task(cfg.data.n_val, L, rng)
    sp = SoftPrompt(a.n_prompt, model.cfg.d_model, a.n_classes, np.random.default_rng(cfg.train.seed),
                    dtype=np.dtype(model.cfg.dtype))
    res = tune_soft_prompt(model, sp, train, val, lr=a.lr, epochs=a.epochs, patience=a.patience,
                           batch_size=a.batch_size, seed=cfg.train.seed)
    from .training import MetricsWriter
    mw = MetricsWriter(os.path.join(out, "metrics.csv"), columns=("epoch", "loss", "val_acc"))
    for row in res.history:
        mw.write(**row)
    mw.close()
    save_soft_prompt(os.path.join(out, "prompt.ckpt"), sp, base)
    print(f"n_prompt={a.n_prompt} val_acc={res.val_acc:.4f} best_epoch={res.best_epoch} "
          f"params_unchanged={res.hash_before == res.hash_after}")
    return EXIT_OK


def cmd_sample(args) -> int:
    from .training import load_model
    cfg = _config(args)
    if args.temperature <= 0:
        raise UsageError("--temperature must be > 0")
    if args.num < 0:
        raise UsageError("-n must be >= 0")
    model, _ = load_model(args.ckpt)
    prompt = tok.encode(args.prompt)
    if len(prompt) + args.num > model.cfg.max_len:
        raise UsageError(f"prompt + samples exceed max_len {model.cfg.max_len}")
    ids = sample_tokens(model, prompt, args.num, args.temperature, np.random.default_rng(cfg.train.seed))
    text = tok.decode(ids)
    print(text)
    out = _out(args, required=False)
    if out:
        with open(os.path.join(out, "sample.txt"), "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    out = _out(args)
    b = cfg.bench
    mixer = args.mixer or b.mixer
    lengths = parse_lengths(args.lengths) if args.lengths else None
    plan = B.default_plan(mixer, lengths)
    reps = args.reps if args.reps is not None else b.reps
    if reps < 1:
        raise UsageError("--reps must be >= 1")

    def show(r):
        print(f"{r.mixer:9s} L={r.length:7d} fwd={r.forward_ms:10.1f} ms  fwd+bwd={r.fwd_bwd_ms:10.1f} ms",
              flush=True)

    res = B.run_bench(plan, batch=b.batch, width=cfg.model.d_model, layers=cfg.model.n_layers,
                      reps=reps, warmup=b.warmup, lean=b.lean, seed=cfg.train.seed,
                      threads=args.device_threads, on_row=show)
    B.write_bench_csv(os.path.join(out, "bench.csv"), res)
    for m in plan:
        try:
            print(f"{m} exponent {B.scaling_fit(res, m):.3f}")
        except DataError as e:
            print(f"{m} exponent not fitted: {e}")
    if args.kernels:
        rows = B.compare_kernels()
        B.write_kernel_csv(os.path.join(out, "kernels.csv"), rows)
        for r in rows:
            print(f"{r['kernel']:28s} numba {r['numba_ms']:8.2f} ms  numpy {r['numpy_ms']:8.2f} ms")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from . import verify
    _config(args)
    checks = verify.run_selftest(quick=not args.full)
    for c in checks:
        print(c.line())
    return EXIT_OK if all(c.ok for c in checks) else EXIT_RUNTIME


COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "softprompt": cmd_softprompt,
            "sample": cmd_sample, "bench": cmd_bench, "selftest": cmd_selftest}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, OSError, ValueError, RuntimeError, IndexError, KeyError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
