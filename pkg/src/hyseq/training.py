"""Optimizer, schedules and the pretraining / fine-tuning loops."""
from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .data import CopyBatch, GenomeStore, gen_composition_classification, gen_long_range_copy, sample_markov
from .errors import ConfigError, DataError, NumericalError, StateError
from .model import ClassificationHead, DecoderStack, ModelConfig, pool
from .tensor import Tensor, no_grad

IGNORE = -100


# ---------------------------------------------------------------------------
# optimizer

def default_no_decay(name: str, p) -> bool:
    """Biases, norm gains, the implicit filter MLP and the long-conv skip weight."""
    return p.ndim < 2 or ".filter." in name or name.endswith("conv_bias")


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments.

    Only parameters with ``requires_grad`` at construction are updated.
    """

    def __init__(self, named_params, lr: float = 6e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.1, no_decay: Callable = default_no_decay,
                 lr_scale: dict[str, float] | None = None):
        self.params = [(n, p) for n, p in named_params if p.requires_grad]
        self.lr_scale = {n: 1.0 for n, _ in self.params}
        for prefix, f in (lr_scale or {}).items():
            for n in self.lr_scale:
                if n.startswith(prefix):
                    self.lr_scale[n] = float(f)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.decay = {n: 0.0 if no_decay(n, p) else weight_decay for n, p in self.params}
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        missing = [n for n, p in self.params if p.grad is None]
        if missing:
            raise StateError(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for n, p in self.params:
            g = p.grad.astype(p.dtype, copy=False)
            dt = p.dtype.type
            lr_n = lr * self.lr_scale[n]
            m, v = self.m[n], self.v[n]
            m *= dt(self.b1)
            m += dt(1 - self.b1) * g
            v *= dt(self.b2)
            v += dt(1 - self.b2) * (g * g)
            if self.decay[n]:
                p.data *= dt(1 - lr_n * self.decay[n])
            p.data -= dt(lr_n / bc1) * m / (np.sqrt(v / dt(bc2)) + dt(self.eps))
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n, _ in self.params:
            out[f"opt.m.{n}"] = self.m[n]
            out[f"opt.v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays: dict, t: int) -> None:
        for n, p in self.params:
            self.m[n] = arrays[f"opt.m.{n}"].astype(p.dtype, copy=True)
            self.v[n] = arrays[f"opt.v.{n}"].astype(p.dtype, copy=True)
        self.t = int(t)


def cosine_lr(step: int, total: int, base_lr: float, warmup_steps: int,
              min_ratio: float = 0.1) -> float:
    """Linear warm-up to ``base_lr``, then cosine decay to ``min_ratio * base_lr`` at ``total``."""
    step = min(max(step, 0), total)
    min_lr = base_lr * min_ratio
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total - warmup_steps
    if span <= 0:
        return base_lr
    prog = (step - warmup_steps) / span
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * prog))


# ---------------------------------------------------------------------------
# sequence-length warm-up

def stage_lengths(target: int, start: int = 64) -> list[int]:
    if target < 1 or start < 1:
        raise ConfigError("lengths must be positive")
    out = []
    L = start
    while L < target:
        out.append(L)
        L *= 2
    out.append(target)
    return out


def accumulation_factor(batch: int, L: int, max_micro_tokens: int | None) -> int:
    """Smallest divisor k of ``batch`` with (batch / k) * L <= max_micro_tokens."""
    if not max_micro_tokens:
        return 1
    for acc in range(1, batch + 1):
        if batch % acc == 0 and (batch // acc) * L <= max_micro_tokens:
            return acc
    return batch


@dataclass
class WarmupSchedule:
    """Staged curriculum: L1, 2 L1, 4 L1, ... clamped to ``target``.

    The number of sequences per optimizer step stays ``batch_size`` in every
    stage. When ``max_micro_tokens`` is set, each step is split into
    ``accum`` equal micro-batches so a single forward never exceeds that
    many tokens.
    """

    target: int
    total_steps: int
    batch_size: int
    start: int = 64
    steps_per_stage: list[int] | None = None
    max_micro_tokens: int | None = None
    stage: int = 0
    step_in_stage: int = 0
    steps_done: int = 0
    tokens: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.lengths = stage_lengths(self.target, self.start)
        S = len(self.lengths)
        if self.steps_per_stage is None:
            base = self.total_steps // S
            self.steps_per_stage = [base] * S
            self.steps_per_stage[-1] += self.total_steps - base * S
        else:
            self.steps_per_stage = [int(s) for s in self.steps_per_stage]
            if len(self.steps_per_stage) != S:
                raise ConfigError(f"{len(self.steps_per_stage)} stage step counts for {S} stages")
            self.total_steps = sum(self.steps_per_stage)
        self._skip_empty()

    def _skip_empty(self):
        while self.stage < len(self.lengths) and self.step_in_stage >= self.steps_per_stage[self.stage]:
            self.stage += 1
            self.step_in_stage = 0

    @property
    def exhausted(self) -> bool:
        return self.stage >= len(self.lengths)

    def accumulation(self, L: int) -> int:
        return accumulation_factor(self.batch_size, L, self.max_micro_tokens)

    def current(self) -> tuple[int, int]:
        if self.exhausted:
            raise StateError("warm-up schedule exhausted")
        L = self.lengths[self.stage]
        return L, self.accumulation(L)

    def next(self) -> tuple[int, int]:
        """Length and accumulation factor for the next optimizer step; then advance."""
        L, acc = self.current()
        self.tokens += self.batch_size * L
        self.steps_done += 1
        self.step_in_stage += 1
        self._skip_empty()
        return L, acc

    def expected_tokens(self) -> int:
        return sum(s * L * self.batch_size for s, L in zip(self.steps_per_stage, self.lengths))

    def state(self) -> dict:
        return {"stage": self.stage, "step_in_stage": self.step_in_stage,
                "steps_done": self.steps_done, "tokens": self.tokens}

    def load_state(self, st: dict) -> None:
        for k in ("stage", "step_in_stage", "steps_done", "tokens"):
            setattr(self, k, int(st[k]))


def warmup_next(ws: WarmupSchedule) -> tuple[int, int]:
    return ws.next()


class FixedLength:
    """Schedule stand-in without warm-up: every step uses ``length``."""

    def __init__(self, length: int, total_steps: int, batch_size: int,
                 max_micro_tokens: int | None = None):
        self._ws = WarmupSchedule(length, total_steps, batch_size, start=length,
                                  max_micro_tokens=max_micro_tokens)

    def __getattr__(self, name):
        return getattr(self._ws, name)

    def next(self):
        return self._ws.next()


# ---------------------------------------------------------------------------
# training config and data sources

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    seq_len: int = 1024
    lr: float = 6e-4
    warmup_steps: int = 500
    min_lr_ratio: float = 0.1
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_micro_tokens: int = 65536
    length_warmup: bool = False
    warmup_start: int = 64
    eval_every: int = 100
    val_sequences: int = 64
    log_every: int = 10
    seed: int = 0
    time_budget_s: float = 0.0
    checkpoint_every: int = 0
    epochs: int = 20
    patience: int = 0
    head_lr_scale: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in known:
                raise ConfigError(f"unknown train option {k!r}")
            default = getattr(cls, k)
            if isinstance(default, bool) and isinstance(v, str):
                v = v.strip().lower() in ("1", "true", "yes", "on")
            try:
                kw[k] = type(default)(v)
            except (TypeError, ValueError):
                raise ConfigError(f"train option {k}={v!r} is not a {type(default).__name__}") from None
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


class LMSource:
    """Produces (inputs, targets) next-token batches from a caller-owned rng."""

    def batch(self, rng: np.random.Generator, n: int, L: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


class MarkovSource(LMSource):
    def __init__(self, P: np.ndarray, order: int = 1):
        self.P = np.asarray(P, dtype=np.float64)
        self.order = order

    def batch(self, rng, n, L):
        seq = sample_markov(self.P, self.order, n, L + 1, rng)
        return seq[:, :-1], seq[:, 1:]


class GenomeSource(LMSource):
    """Uniform windows of L+1 bases from the named chromosomes (N-padded if short)."""

    def __init__(self, store: GenomeStore, chromosomes: Sequence[str] | None = None):
        from . import tokenizer as tk
        self.store = store
        self.chromosomes = list(chromosomes) if chromosomes else store.names
        self._enc = {c: tk.encode(store.sequence(c)) for c in self.chromosomes}

    def batch(self, rng, n, L):
        from . import tokenizer as tk
        out = np.full((n, L + 1), tk.N, dtype=np.int64)
        for i in range(n):
            c = self.chromosomes[int(rng.integers(len(self.chromosomes)))]
            seq = self._enc[c]
            s = int(rng.integers(len(seq) - L)) if len(seq) > L + 1 else 0
            w = seq[s:s + L + 1]
            out[i, :len(w)] = w
        return out[:, :-1], out[:, 1:]


class CompositionSource(LMSource):
    """Sequences whose A/T vs C/G balance is drawn per sequence (labels discarded)."""

    def __init__(self, bias: float = 0.2):
        self.bias = bias

    def batch(self, rng, n, L):
        _, seq = gen_composition_classification(n, L + 1, rng, self.bias)
        return seq[:, :-1], seq[:, 1:]


class CopySource(LMSource):
    """Long-range copy task; the loss only covers answer positions."""

    def __init__(self, horizon: int, events: int | None = None):
        self.horizon = horizon
        self.events = events

    def batch(self, rng, n, L):
        b: CopyBatch = gen_long_range_copy(n, L, self.horizon, rng, self.events)
        return b.ids, b.targets


# ---------------------------------------------------------------------------
# steps

def _n_valid(t: np.ndarray) -> int:
    return int((t != IGNORE).sum())


def lm_loss_and_grad(model: DecoderStack, inputs: np.ndarray, targets: np.ndarray,
                     accum: int = 1) -> float:
    """Accumulate gradients of the mean next-token loss over the whole batch.

    Each micro-batch's mean loss is weighted by its share of valid target
    positions, so the summed gradient equals the full-batch gradient.
    """
    n = inputs.shape[0]
    if n % accum:
        raise ConfigError(f"batch of {n} does not split into {accum} micro-batches")
    total = _n_valid(targets)
    if total == 0:
        raise DataError("batch has no valid target positions")
    mb = n // accum
    loss_sum = 0.0
    for i in range(0, n, mb):
        t = targets[i:i + mb]
        k = _n_valid(t)
        if k == 0:
            continue
        loss = T.cross_entropy(model(inputs[i:i + mb]), t)
        loss_sum += loss.item() * k
        T.backward(loss * (k / total))
    return loss_sum / total


def evaluate_lm(model: DecoderStack, inputs: np.ndarray, targets: np.ndarray,
                max_micro_tokens: int = 65536) -> float:
    """Mean next-token loss over all valid positions (eval mode, no tape)."""
    was = model.training
    model.eval()
    try:
        L = inputs.shape[1]
        mb = max(1, max_micro_tokens // max(L, 1))
        tot, cnt = 0.0, 0
        with no_grad():
            for i in range(0, inputs.shape[0], mb):
                t = targets[i:i + mb]
                k = _n_valid(t)
                if k == 0:
                    continue
                tot += T.cross_entropy(model(inputs[i:i + mb]), t).item() * k
                cnt += k
    finally:
        model.train(was)
    return tot / max(cnt, 1)


def answer_accuracy(model: DecoderStack, inputs, targets, max_micro_tokens: int = 65536) -> float:
    """Argmax accuracy at positions with a target (e.g. copy-task answers)."""
    was = model.training
    model.eval()
    hit = cnt = 0
    try:
        mb = max(1, max_micro_tokens // inputs.shape[1])
        with no_grad():
            for i in range(0, inputs.shape[0], mb):
                t = targets[i:i + mb]
                mask = t != IGNORE
                if not mask.any():
                    continue
                pred = model(inputs[i:i + mb]).data.argmax(-1)
                hit += int((pred[mask] == t[mask]).sum())
                cnt += int(mask.sum())
    finally:
        model.train(was)
    return hit / max(cnt, 1)


# ---------------------------------------------------------------------------
# metrics and state

METRIC_COLUMNS = ("step", "length", "loss", "ppl", "lr", "wall_ms", "val_loss", "val_ppl", "tokens")


class MetricsWriter:
    """Append-only CSV log with a header row."""

    def __init__(self, path, columns=METRIC_COLUMNS, append: bool = False):
        self.path = path
        self.columns = tuple(columns)
        self.rows: list[dict] = []
        if path is not None:
            exists = append and os.path.exists(path)
            self._fh = open(path, "a" if exists else "w", encoding="utf-8", newline="")
            self._w = csv.writer(self._fh, lineterminator="\n")
            if not exists:
                self._w.writerow(self.columns)
        else:
            self._fh = None

    def write(self, **row) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._w.writerow([_fmt(row.get(c, "")) for c in self.columns])
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def save_training_state(path, model: DecoderStack, opt: AdamW | None, data_rng, step: int,
                        config_text: str = "", extra_meta: dict | None = None,
                        extra_arrays: dict | None = None) -> str:
    arrays = {f"model.{k}": v for k, v in model.state_dict().items()}
    if opt is not None:
        arrays.update(opt.state_arrays())
    if extra_arrays:
        arrays.update(extra_arrays)
    meta = {"model_config": model.cfg.to_dict(), "step": int(step),
            "model_rng": ckpt.rng_state(model.rng),
            "opt_t": opt.t if opt is not None else 0}
    if data_rng is not None:
        meta["data_rng"] = ckpt.rng_state(data_rng)
    if extra_meta:
        meta.update(extra_meta)
    return ckpt.save(path, ckpt.Checkpoint(arrays, config_text, meta))


def load_model(path_or_ck) -> tuple[DecoderStack, ckpt.Checkpoint]:
    ck = path_or_ck if isinstance(path_or_ck, ckpt.Checkpoint) else ckpt.load(path_or_ck)
    cfg = ModelConfig.from_dict(ck.meta["model_config"])
    model = DecoderStack(cfg)
    model.load_state_dict({k[len("model."):]: v for k, v in ck.arrays.items() if k.startswith("model.")})
    if "model_rng" in ck.meta:
        model.rng = ckpt.rng_from_state(ck.meta["model_rng"])
    return model, ck


def _diagnostic_dump(out_dir, step, L, lr, loss, model) -> str | None:
    info = {"step": step, "length": L, "lr": lr, "loss": repr(loss), "params": {}}
    for n, p in model.named_parameters():
        d = p.data
        info["params"][n] = {"finite": bool(np.isfinite(d).all()),
                             "abs_max": float(np.abs(d[np.isfinite(d)]).max(initial=0.0)),
                             "grad_finite": None if p.grad is None else bool(np.isfinite(p.grad).all())}
    if out_dir is None:
        return None
    path = os.path.join(out_dir, "diagnostic.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(info, fh, indent=2)
    return path


# ---------------------------------------------------------------------------
# pretraining

@dataclass
class TrainResult:
    steps: int
    tokens: int
    val_loss: float
    val_ppl: float
    history: list[dict] = field(default_factory=list)
    stopped_early: bool = False


def make_schedule(tcfg: TrainConfig):
    if tcfg.length_warmup:
        return WarmupSchedule(tcfg.seq_len, tcfg.steps, tcfg.batch_size, start=tcfg.warmup_start,
                              max_micro_tokens=tcfg.max_micro_tokens)
    return FixedLength(tcfg.seq_len, tcfg.steps, tcfg.batch_size, tcfg.max_micro_tokens)


def make_optimizer(model, tcfg: TrainConfig, params=None) -> AdamW:
    named = params if params is not None else model.named_parameters()
    return AdamW(named, lr=tcfg.lr, betas=(tcfg.beta1, tcfg.beta2), eps=tcfg.eps,
                 weight_decay=tcfg.weight_decay)


def pretrain(model: DecoderStack, source: LMSource, tcfg: TrainConfig, out_dir=None,
             val: tuple[np.ndarray, np.ndarray] | None = None, config_text: str = "",
             resume: str | None = None, stop_steps: int | None = None,
             on_eval: Callable[[int, float], bool] | None = None) -> TrainResult:
    """Next-token training.

    Writes ``metrics.csv`` and ``model.ckpt`` under ``out_dir`` when given.
    ``stop_steps`` ends the run early (the schedules still span
    ``tcfg.steps``) so a run can be split and resumed. ``on_eval`` may
    return True to stop after a validation pass.
    """
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    schedule = make_schedule(tcfg)
    opt = make_optimizer(model, tcfg)
    data_rng = np.random.default_rng(tcfg.seed + 1)
    step = 0
    if resume is not None:
        ck = ckpt.load(resume)
        model.load_state_dict({k[6:]: v for k, v in ck.arrays.items() if k.startswith("model.")})
        model.rng = ckpt.rng_from_state(ck.meta["model_rng"])
        opt.load_state_arrays(ck.arrays, ck.meta["opt_t"])
        data_rng = ckpt.rng_from_state(ck.meta["data_rng"])
        schedule.load_state(ck.meta["schedule"])
        step = int(ck.meta["step"])
    if val is None:
        vrng = np.random.default_rng(tcfg.seed + 7919)
        val = source.batch(vrng, tcfg.val_sequences, tcfg.seq_len)
    metrics = MetricsWriter(os.path.join(out_dir, "metrics.csv") if out_dir else None,
                            append=resume is not None)
    model.train()
    t0 = time.perf_counter()
    val_loss = float("nan")
    stopped = False
    end = tcfg.steps if stop_steps is None else min(tcfg.steps, stop_steps)
    try:
        while step < end and not schedule.exhausted:
            L, acc = schedule.next()
            lr = cosine_lr(step, tcfg.steps, tcfg.lr, tcfg.warmup_steps, tcfg.min_lr_ratio)
            x, y = source.batch(data_rng, tcfg.batch_size, L)
            loss = lm_loss_and_grad(model, x, y, acc)
            if not math.isfinite(loss):
                path = _diagnostic_dump(out_dir, step, L, lr, loss, model)
                raise NumericalError(f"non-finite loss {loss} at step {step}"
                                     + (f"; diagnostics in {path}" if path else ""))
            opt.step(lr)
            step += 1
            row = {"step": step, "length": L, "loss": loss, "ppl": math.exp(min(loss, 50.0)),
                   "lr": lr, "wall_ms": int((time.perf_counter() - t0) * 1000),
                   "tokens": schedule.tokens}
            do_eval = tcfg.eval_every and (step % tcfg.eval_every == 0 or step == tcfg.steps)
            if do_eval:
                val_loss = evaluate_lm(model, val[0], val[1], tcfg.max_micro_tokens)
                row["val_loss"] = val_loss
                row["val_ppl"] = math.exp(min(val_loss, 50.0))
            if do_eval or tcfg.log_every and step % tcfg.log_every == 0:
                metrics.write(**row)
            if tcfg.checkpoint_every and out_dir and step % tcfg.checkpoint_every == 0:
                save_training_state(os.path.join(out_dir, "model.ckpt"), model, opt, data_rng, step,
                                    config_text, {"schedule": schedule.state()})
            if do_eval and on_eval is not None and on_eval(step, val_loss):
                stopped = True
                break
            if tcfg.time_budget_s and time.perf_counter() - t0 >= tcfg.time_budget_s:
                stopped = True
                break
    finally:
        metrics.close()
    if not math.isfinite(val_loss) or metrics.rows and "val_loss" not in metrics.rows[-1]:
        val_loss = evaluate_lm(model, val[0], val[1], tcfg.max_micro_tokens)
    if out_dir:
        save_training_state(os.path.join(out_dir, "model.ckpt"), model, opt, data_rng, step,
                            config_text, {"schedule": schedule.state()})
    return TrainResult(step, schedule.tokens, val_loss, math.exp(min(val_loss, 50.0)),
                       metrics.rows, stopped)


# ---------------------------------------------------------------------------
# fine-tuning

@dataclass
class FinetuneResult:
    steps: int
    val_acc: float
    history: list[dict] = field(default_factory=list)


def classify_logits(model: DecoderStack, head: ClassificationHead, ids: np.ndarray,
                    pooling: str = "mean") -> Tensor:
    return head(pool(model.hidden(ids), pooling))


def predict(model, head, ids: np.ndarray, pooling: str = "mean", max_micro_tokens: int = 65536) -> np.ndarray:
    was_m, was_h = model.training, head.training
    model.eval()
    head.eval()
    out = []
    try:
        mb = max(1, max_micro_tokens // ids.shape[1])
        with no_grad():
            for i in range(0, ids.shape[0], mb):
                out.append(classify_logits(model, head, ids[i:i + mb], pooling).data.argmax(-1))
    finally:
        model.train(was_m)
        head.train(was_h)
    return np.concatenate(out)


def accuracy(model, head, labels, ids, pooling: str = "mean", max_micro_tokens: int = 65536) -> float:
    return float((predict(model, head, ids, pooling, max_micro_tokens) == np.asarray(labels)).mean())


def finetune(model: DecoderStack, head: ClassificationHead, train: tuple[np.ndarray, np.ndarray],
             val: tuple[np.ndarray, np.ndarray], tcfg: TrainConfig, frozen_backbone: bool = False,
             pooling: str = "mean", out_dir=None, schedule=None, max_steps: int | None = None,
             config_text: str = "") -> FinetuneResult:
    """Cross-entropy over class logits from pooled hidden states.

    Without a ``schedule`` the loop runs ``tcfg.epochs`` shuffled epochs.
    With a length ``schedule`` each step draws ``batch_size`` training
    sequences and crops a random window of the stage length from each.
    """
    y_tr, x_tr = np.asarray(train[0], dtype=np.int64), np.asarray(train[1])
    y_va, x_va = np.asarray(val[0], dtype=np.int64), np.asarray(val[1])
    C = head.n_classes
    for name, y in (("train", y_tr), ("validation", y_va)):
        if y.size and (y.min() < 0 or y.max() >= C):
            raise DataError(f"{name} label outside [0, {C})")
    if x_tr.shape[1] > model.cfg.max_len:
        raise DataError(f"sequences of length {x_tr.shape[1]} exceed max_len {model.cfg.max_len}")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    # the LM head is bypassed by the classifier, so it is never optimized here
    cls_params = [(f"cls.{n}", p) for n, p in head.named_parameters()]
    if frozen_backbone:
        model.requires_grad_(False)
        named = cls_params
    else:
        model.requires_grad_(True)
        named = [(n, p) for n, p in model.named_parameters() if not n.startswith("head.")] + cls_params
    opt = AdamW(named, lr=tcfg.lr, betas=(tcfg.beta1, tcfg.beta2), eps=tcfg.eps,
                weight_decay=tcfg.weight_decay, lr_scale={"cls.": tcfg.head_lr_scale})
    rng = np.random.default_rng(tcfg.seed + 3)
    n = len(y_tr)
    B = min(tcfg.batch_size, n)
    if schedule is None:
        total = tcfg.epochs * (n // B)
    else:
        total = schedule.total_steps
    if max_steps is not None:
        total = min(total, max_steps)
    metrics = MetricsWriter(os.path.join(out_dir, "metrics.csv") if out_dir else None,
                            columns=("step", "epoch", "length", "loss", "lr", "wall_ms", "val_acc"))
    model.train()
    head.train()
    t0 = time.perf_counter()
    step = 0
    best = -1.0
    bad = 0
    val_acc = float("nan")

    def one_step(xb, yb, acc, lr):
        mb = xb.shape[0] // acc
        tot = 0.0
        for i in range(0, xb.shape[0], mb):
            loss = T.cross_entropy(classify_logits(model, head, xb[i:i + mb], pooling), yb[i:i + mb])
            tot += loss.item() * len(yb[i:i + mb])
            T.backward(loss * (len(yb[i:i + mb]) / len(yb)))
        opt.step(lr)
        return tot / len(yb)

    try:
        epoch = 0
        while step < total:
            if schedule is None:
                order = rng.permutation(n)
                batches = [order[i:i + B] for i in range(0, n - B + 1, B)]
            else:
                batches = [rng.choice(n, size=B, replace=n < B) for _ in range(tcfg.eval_every or 50)]
            for idx in batches:
                if step >= total:
                    break
                lr = cosine_lr(step, total, tcfg.lr, min(tcfg.warmup_steps, total // 10), tcfg.min_lr_ratio)
                if schedule is None:
                    L = x_tr.shape[1]
                    acc = accumulation_factor(len(idx), L, tcfg.max_micro_tokens)
                    xb = x_tr[idx]
                else:
                    L, acc = schedule.next()
                    starts = rng.integers(0, x_tr.shape[1] - L + 1, size=len(idx))
                    xb = np.stack([x_tr[i, s:s + L] for i, s in zip(idx, starts)])
                loss = one_step(xb, y_tr[idx], acc, lr)
                if not math.isfinite(loss):
                    raise NumericalError(f"non-finite loss at fine-tuning step {step}")
                step += 1
                if tcfg.time_budget_s and time.perf_counter() - t0 >= tcfg.time_budget_s:
                    total = step
                    break
                if tcfg.log_every and step % tcfg.log_every == 0:
                    metrics.write(step=step, epoch=epoch, length=L, loss=loss, lr=lr,
                                  wall_ms=int((time.perf_counter() - t0) * 1000))
            epoch += 1
            if schedule is None or step >= total:
                val_acc = accuracy(model, head, y_va, x_va, pooling, tcfg.max_micro_tokens)
                metrics.write(step=step, epoch=epoch, length=x_tr.shape[1], lr="", loss="",
                              wall_ms=int((time.perf_counter() - t0) * 1000), val_acc=val_acc)
                if tcfg.patience:
                    if val_acc > best:
                        best, bad = val_acc, 0
                    else:
                        bad += 1
                        if bad >= tcfg.patience:
                            break
    finally:
        metrics.close()
        if frozen_backbone:
            model.requires_grad_(True)
    if not math.isfinite(val_acc):
        val_acc = accuracy(model, head, y_va, x_va, pooling, tcfg.max_micro_tokens)
    if out_dir:
        extra = {f"cls.{k}": v for k, v in head.state_dict().items()}
        save_training_state(os.path.join(out_dir, "model.ckpt"), model, None, None, step, config_text,
                            {"n_classes": C, "pooling": pooling}, extra)
    return FinetuneResult(step, val_acc, metrics.rows)
