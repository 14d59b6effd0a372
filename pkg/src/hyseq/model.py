"""Decoder-only stack of pre-norm residual blocks around a Hyena (or attention) mixer."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .hyena import CausalSelfAttention, HyenaOperator
from .nn import FeedForward, LayerNorm, Linear, Module, normal
from .tensor import Tensor, no_grad
from .tokenizer import VOCAB_SIZE


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 128
    mixer: str = "hyena"
    mlp_expansion: int = 4
    vocab_size: int = VOCAB_SIZE
    max_len: int = 1024
    embed_dropout: float = 0.1
    resid_dropout: float = 0.0
    filter_emb_dim: int = 5
    filter_hidden: int = 64
    short_kernel: int = 3
    dtype: str = "float32"
    seed: int = 0
    lean: bool = False
    recompute: bool = False

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.d_model < 8:
            raise ConfigError("d_model must be >= 8")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.mixer not in ("hyena", "attention"):
            raise ConfigError(f"mixer must be 'hyena' or 'attention', got {self.mixer!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in known:
                raise ConfigError(f"unknown model option {k!r}")
            default = getattr(cls, k)
            if isinstance(default, bool) and isinstance(v, str):
                v = v.strip().lower() in ("1", "true", "yes", "on")
            kw[k] = type(default)(v) if not isinstance(v, type(default)) else v
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


class Block(Module):
    def __init__(self, cfg: ModelConfig, rng):
        dtype = np.dtype(cfg.dtype)
        out_std = 0.02 / math.sqrt(2 * cfg.n_layers)
        self.norm1 = LayerNorm(cfg.d_model, dtype)
        if cfg.mixer == "hyena":
            self.mixer = HyenaOperator(cfg.d_model, cfg.max_len, rng, dtype, out_std=out_std,
                                       filter_emb_dim=cfg.filter_emb_dim,
                                       filter_hidden=cfg.filter_hidden,
                                       short_kernel=cfg.short_kernel)
        else:
            self.mixer = CausalSelfAttention(cfg.d_model, rng, dtype, out_std=out_std)
        self.norm2 = LayerNorm(cfg.d_model, dtype)
        self.ffn = FeedForward(cfg.d_model, cfg.mlp_expansion, rng, dtype, out_std=out_std,
                               fused=cfg.lean)
        self.resid_dropout = cfg.resid_dropout
        self.recompute = cfg.recompute

    def _mix(self, x: Tensor, rng) -> Tensor:
        return self.mixer(x)

    def __call__(self, x: Tensor, rng) -> Tensor:
        train = self.training
        h = self.norm1(x)
        if self.recompute:
            # mixer activations are rebuilt during backward instead of stored
            h = T.recompute(self._mix, h, self.mixer.parameters())
        else:
            h = self.mixer(h)
        x = x + T.dropout(h, self.resid_dropout, rng, train)
        return x + T.dropout(self.ffn(self.norm2(x)), self.resid_dropout, rng, train)


class DecoderStack(Module):
    """Token embedding, ``n_layers`` blocks, final norm and an untied LM head.

    ``self.rng`` drives dropout only; it is part of the checkpointed state.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dtype = np.dtype(cfg.dtype)
        self.embed = normal(rng, (cfg.vocab_size, cfg.d_model), 0.02, dtype)
        self.layers = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.final_norm = LayerNorm(cfg.d_model, dtype)
        self.head = Linear(cfg.d_model, cfg.vocab_size, rng, dtype, bias=False)
        self.rng = np.random.default_rng(rng.integers(2**63))

    def embed_tokens(self, tokens) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        return T.embedding(self.embed, tokens)

    def forward_embeddings(self, x: Tensor) -> Tensor:
        """Run the blocks on [B, L, D] inputs; returns final-normed hidden states."""
        if x.shape[1] > self.cfg.max_len:
            raise DimensionError(f"sequence length {x.shape[1]} exceeds max_len {self.cfg.max_len}")
        x = T.dropout(x, self.cfg.embed_dropout, self.rng, self.training)
        for block in self.layers:
            x = block(x, self.rng)
        return self.final_norm(x)

    def hidden(self, tokens) -> Tensor:
        return self.forward_embeddings(self.embed_tokens(tokens))

    def forward_lm(self, tokens) -> Tensor:
        """Next-token logits [B, L, vocab]."""
        return self.head(self.hidden(tokens))

    __call__ = forward_lm

    def backbone_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("head.")]


def pool(hidden: Tensor, strategy: str = "mean", lengths=None) -> Tensor:
    """Collapse [B, L, D] to [B, D] by averaging or by taking the last real position."""
    if hidden.shape[1] < 1:
        raise DimensionError("cannot pool an empty sequence")
    if strategy == "mean":
        return T.mean(hidden, axis=1)
    if strategy == "last_token":
        B, L = hidden.shape[:2]
        last = np.full(B, L - 1) if lengths is None else np.asarray(lengths, dtype=np.int64) - 1
        return T.getitem(hidden, (np.arange(B), last))
    raise ValueError(f"unknown pooling strategy {strategy!r}")


class ClassificationHead(Module):
    """Linear classifier over pooled features.

    With ``standardize`` the pooled vector is centred and scaled per feature
    using batch statistics in training and running statistics in eval.
    Mean-pooled features of long sequences differ between samples by a small
    fraction of their magnitude; standardizing lets the linear layer see
    those differences at unit scale from the first step.
    """

    def __init__(self, d_model: int, n_classes: int, rng=None, dtype=np.float32, zero: bool = False,
                 standardize: bool = False, momentum: float = 0.1, eps: float = 1e-5):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.proj = Linear(d_model, n_classes, rng, dtype)
        if zero:
            self.proj.weight.data[:] = 0
        self.n_classes = n_classes
        self.standardize = bool(standardize)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.running_mean = np.zeros(d_model, dtype=dtype)
        self.running_var = np.ones(d_model, dtype=dtype)

    def __call__(self, pooled: Tensor) -> Tensor:
        if not self.standardize:
            return self.proj(pooled)
        if self.training and pooled.shape[0] > 1:
            z, mu, var = T.batch_standardize(pooled, self.eps)
            if T.grad_enabled():
                m = self.momentum
                B = pooled.shape[0]
                self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(self.running_mean.dtype)
                unbiased = var * (B / (B - 1))
                self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
            return self.proj(z)
        rstd = 1.0 / np.sqrt(self.running_var + self.eps)
        z = T.scale_channels(T.add_bias(pooled, Tensor(-self.running_mean.astype(pooled.dtype))),
                             Tensor(rstd.astype(pooled.dtype)))
        return self.proj(z)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = super().state_dict()
        if self.standardize:
            out["running_mean"] = self.running_mean
            out["running_var"] = self.running_var
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        state = dict(state)
        if self.standardize:
            self.running_mean = np.array(state.pop("running_mean"), dtype=self.running_mean.dtype)
            self.running_var = np.array(state.pop("running_var"), dtype=self.running_var.dtype)
        super().load_state_dict(state)


def forward_classify(model: DecoderStack, head: ClassificationHead, tokens,
                     strategy: str = "mean", lengths=None) -> Tensor:
    return head(pool(model.hidden(tokens), strategy, lengths))


def sample_tokens(model: DecoderStack, prompt, n: int, temperature: float = 1.0,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Autoregressive multinomial sampling; returns prompt followed by ``n`` new ids."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    ids = list(np.asarray(prompt, dtype=np.int64).reshape(-1))
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for _ in range(n):
                ctx = np.asarray(ids[-model.cfg.max_len:], dtype=np.int64)[None]
                logits = model.forward_lm(ctx).data[0, -1].astype(np.float64) / temperature
                p = T.softmax_np(logits)
                ids.append(int(rng.choice(len(p), p=p)))
    finally:
        model.train(was_training)
    return np.asarray(ids, dtype=np.int64)


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of :class:`DecoderStack`."""
    D, V, E = cfg.d_model, cfg.vocab_size, cfg.mlp_expansion
    if cfg.mixer == "hyena":
        P, H, K = cfg.filter_emb_dim, cfg.filter_hidden, cfg.short_kernel
        mixer = (3 * (D * D + D) + 3 * (D * K + D) + (P * H + H + H * H + H + H * D)
                 + D + (D * D + D))
    else:
        mixer = 3 * D * D + D * D + D
    ffn = D * E * D + E * D + E * D * D + D
    block = mixer + ffn + 4 * D
    return V * D + cfg.n_layers * block + 2 * D + D * V
