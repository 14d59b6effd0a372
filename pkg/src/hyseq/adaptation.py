"""Soft prompting and few-shot prompting with nucleotide label letters.

Classes are read out as next-token logits of designated letters at the final
``SEP`` of ``[prompt vectors, query, SEP]``. Two-way tasks use A/N, three-way
tasks add G.
"""
from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from . import tokenizer as tok
from .errors import CapacityError, DataError, FormatError, StateError
from .model import DecoderStack
from .nn import Module, Parameter
from .tensor import Tensor, no_grad
from .data import gen_two_factor_composition
from .training import AdamW, LMSource, TrainConfig, cosine_lr

LETTERS = {2: (tok.A, tok.N), 3: (tok.A, tok.N, tok.G)}


def letters_for(n_classes: int) -> tuple[int, ...]:
    if n_classes not in LETTERS:
        raise ValueError(f"label letters are defined for 2 or 3 classes, not {n_classes}")
    return LETTERS[n_classes]


def param_hash(model: Module) -> str:
    """sha256 over parameter names, dtypes, shapes and raw bytes."""
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        a = np.ascontiguousarray(p.data)
        h.update(f"{name}:{a.dtype.str}:{a.shape}".encode())
        h.update(a.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# soft prompts

class SoftPrompt(Module):
    """N trainable input vectors placed before the embedded query."""

    def __init__(self, n_prompt: int, d_model: int, n_classes: int = 2, rng=None,
                 dtype=np.float32, init_std: float = 0.02):
        if n_prompt < 0:
            raise ValueError("n_prompt must be >= 0")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_prompt = int(n_prompt)
        self.n_classes = n_classes
        self.letters = letters_for(n_classes)
        self.theta = Parameter((rng.standard_normal((n_prompt, d_model)) * init_std).astype(dtype))


def _prompt_inputs(model: DecoderStack, sp: SoftPrompt, tokens: np.ndarray) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    B, L = tokens.shape
    need = sp.n_prompt + L + 1
    if need > model.cfg.max_len:
        raise CapacityError(f"{sp.n_prompt} prompt slots + {L} tokens + SEP = {need} "
                            f"exceeds max_len {model.cfg.max_len}")
    ids = np.concatenate([tokens, np.full((B, 1), tok.SEP, dtype=np.int64)], axis=1)
    x = model.embed_tokens(ids)
    if sp.n_prompt == 0:
        return x
    theta = T.stack([sp.theta] * B, axis=0)
    return T.concat([theta, x], axis=1)


def soft_prompt_forward(model: DecoderStack, sp: SoftPrompt, tokens) -> Tensor:
    """Class logits [B, C]: letter logits at the final position."""
    h = model.forward_embeddings(_prompt_inputs(model, sp, tokens))
    last = T.getitem(h, (slice(None), -1))
    logits = model.head(last)
    return T.getitem(logits, (slice(None), np.asarray(sp.letters)))


def predict_letters(model, sp, tokens, batch: int = 64) -> np.ndarray:
    was = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(tokens), batch):
                out.append(soft_prompt_forward(model, sp, tokens[i:i + batch]).data.argmax(-1))
    finally:
        model.train(was)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


@dataclass
class PromptTuneResult:
    val_acc: float
    best_epoch: int
    epochs: int
    hash_before: str
    hash_after: str
    history: list = field(default_factory=list)


def tune_soft_prompt(model: DecoderStack, sp: SoftPrompt, train, val, lr: float = 1e-2,
                     epochs: int = 20, patience: int = 2, batch_size: int = 16,
                     seed: int = 0) -> PromptTuneResult:
    """Optimize only ``sp.theta``; the model's parameters are frozen.

    Runs up to ``epochs`` epochs and stops after ``patience`` epochs without
    a better validation accuracy. The best-scoring theta is restored.
    """
    y_tr, x_tr = np.asarray(train[0], dtype=np.int64), np.asarray(train[1])
    y_va, x_va = np.asarray(val[0], dtype=np.int64), np.asarray(val[1])
    for y in (y_tr, y_va):
        if y.size and (y.min() < 0 or y.max() >= sp.n_classes):
            raise DataError(f"labels must lie in [0, {sp.n_classes})")
    before = param_hash(model)
    history = []

    def val_acc():
        return float((predict_letters(model, sp, x_va) == y_va).mean()) if len(y_va) else float("nan")

    best = val_acc()
    history.append({"epoch": 0, "loss": float("nan"), "val_acc": best})
    best_theta, best_epoch = sp.theta.data.copy(), 0
    if sp.n_prompt == 0:
        return PromptTuneResult(best, 0, 0, before, param_hash(model), history)
    grad_flags = [p.requires_grad for p in model.parameters()]
    model.requires_grad_(False)
    model.eval()   # dropout off: the prompt is fitted to the deterministic model
    opt = AdamW([("theta", sp.theta)], lr=lr, weight_decay=0.0)
    rng = np.random.default_rng(seed)
    n = len(y_tr)
    B = min(batch_size, n)
    per_epoch = max(1, n // B)
    total = epochs * per_epoch
    step = bad = 0
    ep = 0
    try:
        for ep in range(1, epochs + 1):
            order = rng.permutation(n)
            tot = 0.0
            for i in range(per_epoch):
                idx = order[i * B:(i + 1) * B]
                loss = T.cross_entropy(soft_prompt_forward(model, sp, x_tr[idx]), y_tr[idx])
                T.backward(loss)
                opt.step(cosine_lr(step, total, lr, 0, 1.0))
                step += 1
                tot += loss.item()
            acc = val_acc()
            history.append({"epoch": ep, "loss": tot / per_epoch, "val_acc": acc})
            if acc > best:
                best, best_theta, best_epoch, bad = acc, sp.theta.data.copy(), ep, 0
            else:
                bad += 1
                if bad >= patience:
                    break
    finally:
        for p, f in zip(model.parameters(), grad_flags):
            p.requires_grad = f
            p.grad = None
    sp.theta.data = best_theta
    after = param_hash(model)
    if after != before:
        raise StateError("model parameters changed during soft-prompt tuning")
    return PromptTuneResult(best, best_epoch, ep, before, after, history)


def save_soft_prompt(path, sp: SoftPrompt, base_sha256: str) -> str:
    meta = {"kind": "soft_prompt", "base_sha256": base_sha256, "n_prompt": sp.n_prompt,
            "n_classes": sp.n_classes, "letters": list(sp.letters)}
    return ckpt.save(path, ckpt.Checkpoint({"theta": sp.theta.data}, "", meta))


def load_soft_prompt(path, base_sha256: str | None = None) -> SoftPrompt:
    """Load a prompt file; when ``base_sha256`` is given it must match the recorded base."""
    c = ckpt.load(path)
    if c.meta.get("kind") != "soft_prompt" or "theta" not in c.arrays:
        raise FormatError(f"{path} is not a soft-prompt file")
    if base_sha256 is not None and c.meta["base_sha256"] != base_sha256:
        raise FormatError("soft prompt was tuned against a different base checkpoint "
                          f"({c.meta['base_sha256'][:12]} != {base_sha256[:12]})")
    theta = c.arrays["theta"]
    sp = SoftPrompt(theta.shape[0], theta.shape[1] if theta.ndim == 2 else 0, c.meta["n_classes"],
                    dtype=theta.dtype)
    sp.theta.data = theta.copy()
    return sp


class TaskCodeSource(LMSource):
    """Pretraining documents ``prefix X SEP letter`` with a prefix-selected task.

    Every X carries two independent skews (see
    :func:`gen_two_factor_composition`). Documents starting with the fixed
    ``code`` name X's A/T vs C/G balance (A/T-rich -> A, else N); documents
    starting with random bases name its purine balance instead (A/G-rich
    -> A, else N). X alone does not reveal the task, so a frozen backbone
    answers A/T questions by the purine rule, i.e. at chance, until
    something in front of the query plays the role of the code. A tuned
    soft prompt can.
    """

    def __init__(self, code_len: int = 8, p_plain: float = 0.5, bias: float = 0.2, seed: int = 0):
        self.code = np.random.default_rng(seed).integers(tok.A, tok.T + 1, size=code_len)
        self.p_plain = p_plain
        self.bias = bias
        self.letters = np.asarray(LETTERS[2])

    def batch(self, rng, n, L):
        K = len(self.code)
        if L + 1 < K + 3:
            raise CapacityError(f"documents of {L + 1} tokens cannot hold a {K}-token code")
        at, pu, X = gen_two_factor_composition(n, L - 1 - K, rng, self.bias)
        plain = rng.random(n) < self.p_plain
        out = np.empty((n, L + 1), dtype=np.int64)
        out[:, :K] = np.where(plain[:, None], rng.integers(tok.A, tok.T + 1, size=(n, K)), self.code[None])
        out[:, K:L - 1] = X
        out[:, L - 1] = tok.SEP
        out[:, L] = self.letters[1 - np.where(plain, pu, at)]
        return out[:, :-1], out[:, 1:]


def prompt_task(n: int, L: int, rng: np.random.Generator, bias: float = 0.2):
    """The A/T-vs-C/G question a :class:`TaskCodeSource` code selects.

    Returns (labels, ids) with class 0 for A/T-rich rows, read out as
    letter A. Purine balance varies independently of the label.
    """
    at, _, ids = gen_two_factor_composition(n, L, rng, bias)
    return 1 - at, ids


# ---------------------------------------------------------------------------
# few-shot prompts

@dataclass
class FewShotPrompt:
    n_classes: int = 2
    k: int = 1
    max_len: int | None = None

    @property
    def letters(self) -> tuple[int, ...]:
        return letters_for(self.n_classes)

    def length(self, t_demo: int, t_query: int) -> int:
        return self.n_classes * self.k * (t_demo + 3) + t_query + 1


def build_few_shot_prompt(fp: FewShotPrompt, demos, query) -> np.ndarray:
    """``X1 SEP Y1 SEP ... X SEP`` with demos interleaved by class.

    ``demos`` maps class index to a list of at least ``k`` equal-length id
    sequences; round j emits the j-th demo of every class in class order.
    """
    query = np.asarray(query, dtype=np.int64).reshape(-1)
    letters = fp.letters
    parts = []
    t_demo = None
    if fp.k:
        for c in range(fp.n_classes):
            got = demos.get(c, []) if isinstance(demos, dict) else demos[c]
            if len(got) < fp.k:
                raise DataError(f"class {c} has {len(got)} demos, need {fp.k}")
        for j in range(fp.k):
            for c in range(fp.n_classes):
                x = np.asarray(demos[c][j], dtype=np.int64).reshape(-1)
                if t_demo is None:
                    t_demo = len(x)
                elif len(x) != t_demo:
                    raise DataError("demo sequences must share one length")
                if np.any(x == tok.SEP):
                    raise DataError("demo sequences may not contain SEP")
                parts += [x, [tok.SEP, letters[c], tok.SEP]]
    if np.any(query == tok.SEP):
        raise DataError("query may not contain SEP")
    parts += [query, [tok.SEP]]
    ids = np.concatenate([np.asarray(p, dtype=np.int64) for p in parts])
    if fp.max_len is not None and len(ids) > fp.max_len:
        raise CapacityError(f"prompt of {len(ids)} tokens exceeds max_len {fp.max_len}")
    return ids


def parse_few_shot_prompt(ids, fp: FewShotPrompt):
    """Inverse of :func:`build_few_shot_prompt`: returns (demos, labels, query)."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size == 0 or ids[-1] != tok.SEP:
        raise FormatError("prompt must end with SEP")
    cuts = np.flatnonzero(ids == tok.SEP)
    segs = np.split(ids, cuts)
    # segs: [X1], [SEP Y1], [SEP X2], ..., [SEP X], [SEP]
    body = [segs[0]] + [s[1:] for s in segs[1:-1]]
    if len(body) % 2 != 1:
        raise FormatError("unbalanced demo/label segments")
    inv = {l: c for c, l in enumerate(fp.letters)}
    demos, labels = [], []
    for i in range(0, len(body) - 1, 2):
        x, y = body[i], body[i + 1]
        if len(y) != 1 or int(y[0]) not in inv:
            raise FormatError(f"bad label segment {y.tolist()}")
        demos.append(x)
        labels.append(inv[int(y[0])])
    return demos, labels, body[-1]


def _label_target(prompt: np.ndarray, letter: int) -> np.ndarray:
    t = np.full(len(prompt), -100, dtype=np.int64)
    t[-1] = letter
    return t


@dataclass
class InstructionResult:
    val_acc: float
    steps: int
    history: list = field(default_factory=list)


def _sample_prompts(fp, pool_y, pool_x, queries_y, queries_x, rng):
    by_class = {c: np.flatnonzero(pool_y == c) for c in range(fp.n_classes)}
    out = []
    for q, yq in zip(queries_x, queries_y):
        demos = {c: [pool_x[i] for i in rng.choice(by_class[c], size=fp.k, replace=len(by_class[c]) < fp.k)]
                 for c in range(fp.n_classes)} if fp.k else {}
        out.append((build_few_shot_prompt(fp, demos, q), fp.letters[int(yq)]))
    return out


def few_shot_accuracy(model: DecoderStack, fp: FewShotPrompt, pool, queries, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    prompts = _sample_prompts(fp, np.asarray(pool[0]), np.asarray(pool[1]),
                              np.asarray(queries[0]), np.asarray(queries[1]), rng)
    letters = np.asarray(fp.letters)
    was = model.training
    model.eval()
    hit = 0
    try:
        with no_grad():
            for p, want in prompts:
                logits = model(p[None]).data[0, -1]
                hit += int(letters[int(np.argmax(logits[letters]))] == want)
    finally:
        model.train(was)
    return hit / max(len(prompts), 1)


def instruction_tune(model: DecoderStack, fp: FewShotPrompt, pool, tune, val, tcfg: TrainConfig,
                     n: int | None = None, epochs: int = 5) -> InstructionResult:
    """Full-model tuning on the next-token loss at the label position.

    ``tune`` holds (labels, ids) queries; ``n`` of them are used. Each query is
    wrapped in a k-shot prompt whose demos are drawn from ``pool``.
    """
    y_t, x_t = np.asarray(tune[0]), np.asarray(tune[1])
    if n is not None:
        y_t, x_t = y_t[:n], x_t[:n]
    rng = np.random.default_rng(tcfg.seed)
    pool_y, pool_x = np.asarray(pool[0]), np.asarray(pool[1])
    named = [(k, p) for k, p in model.named_parameters()]
    opt = AdamW(named, lr=tcfg.lr, betas=(tcfg.beta1, tcfg.beta2), eps=tcfg.eps,
                weight_decay=tcfg.weight_decay)
    B = max(1, min(tcfg.batch_size, len(y_t)))
    per_epoch = math.ceil(len(y_t) / B)
    total = epochs * per_epoch
    step = 0
    history = []
    model.train()
    t0 = time.perf_counter()
    for ep in range(epochs):
        order = rng.permutation(len(y_t))
        prompts = _sample_prompts(fp, pool_y, pool_x, y_t[order], x_t[order], rng)
        for i in range(0, len(prompts), B):
            chunk = prompts[i:i + B]
            ids = np.stack([p for p, _ in chunk])
            tgt = np.stack([_label_target(p, l) for p, l in chunk])
            loss = T.cross_entropy(model(ids), tgt)
            T.backward(loss)
            lr = cosine_lr(step, total, tcfg.lr, min(tcfg.warmup_steps, total // 10), tcfg.min_lr_ratio)
            opt.step(lr)
            step += 1
        history.append({"epoch": ep + 1, "loss": loss.item(),
                        "wall_ms": int((time.perf_counter() - t0) * 1000)})
    acc = few_shot_accuracy(model, fp, pool, val, seed=tcfg.seed + 1)
    return InstructionResult(acc, step, history)
