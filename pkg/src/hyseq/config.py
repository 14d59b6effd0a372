"""INI run configuration.

Sections: ``[model]`` (ModelConfig fields), ``[train]`` (TrainConfig fields),
``[data]``, ``[bench]`` and ``[adapt]`` (free-form, validated by the command
that reads them). The raw text is kept so checkpoints can echo it back.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = ("model", "train", "data", "bench", "adapt")
SEED_ENV = "HYSEQ_SEED"


@dataclass
class DataConfig:
    source: str = "markov"          # markov | fasta | copy | composition | taskcode
    path: str = ""
    test_chromosomes: str = ""
    entropy: float = 1.0            # markov source entropy rate (nats)
    horizon: int = 512              # copy task
    n_species: int = 5
    separation: float = 0.1
    n_train: int = 400
    n_val: int = 100
    seed: int = 0

    @property
    def test_list(self) -> list[str]:
        return [c.strip() for c in self.test_chromosomes.split(",") if c.strip()]


@dataclass
class BenchConfig:
    lengths: str = "1024..16384"
    mixer: str = "both"
    batch: int = 1
    reps: int = 5
    warmup: int = 2
    lean: bool = True


@dataclass
class AdaptConfig:
    n_prompt: int = 16
    n_classes: int = 2
    shots: int = 0
    epochs: int = 20
    patience: int = 2
    lr: float = 1e-2
    batch_size: int = 16
    base: str = ""


def _coerce(cls, section: str, items: dict):
    known = {f.name: f for f in fields(cls)}
    kw = {}
    for k, v in items.items():
        if k not in known:
            raise ConfigError(f"unknown {section} option {k!r}")
        default = getattr(cls, k) if hasattr(cls, k) else known[k].default
        try:
            if isinstance(default, bool):
                s = str(v).strip().lower()
                if s not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ValueError
                kw[k] = s in ("1", "true", "yes", "on")
            else:
                kw[k] = type(default)(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{k}={v!r} is not a {type(default).__name__}") from None
    return kw


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    text: str = ""

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, model=replace(self.model, seed=seed), train=replace(self.train, seed=seed),
                       data=replace(self.data, seed=seed))


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    extra = [s for s in cp.sections() if s not in SECTIONS]
    if extra:
        raise ConfigError(f"unknown config section(s) {extra}; expected {list(SECTIONS)}")
    sec = {s: dict(cp[s]) if cp.has_section(s) else {} for s in SECTIONS}
    try:
        model = ModelConfig(**_coerce(ModelConfig, "model", sec["model"]))
        train = TrainConfig(**_coerce(TrainConfig, "train", sec["train"]))
    except TypeError as e:
        raise ConfigError(str(e)) from None
    data = DataConfig(**_coerce(DataConfig, "data", sec["data"]))
    bench = BenchConfig(**_coerce(BenchConfig, "bench", sec["bench"]))
    adapt = AdaptConfig(**_coerce(AdaptConfig, "adapt", sec["adapt"]))
    if adapt.n_classes not in (2, 3):
        raise ConfigError("adapt.n_classes must be 2 or 3")
    return RunConfig(model, train, data, bench, adapt, text)


def load_config(path=None, env=None) -> RunConfig:
    """Read ``path`` (defaults when None); ``HYSEQ_SEED`` overrides every seed."""
    text = ""
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    cfg = parse_config(text)
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer") from None
        cfg = cfg.with_seed(seed)
    return cfg


def parse_lengths(spec: str) -> list[int]:
    """'1024..65536' (powers of two between) or '1024,4096,8192'; 'k' suffix allowed."""
    def num(s):
        s = s.strip().lower()
        mult = 1024 if s.endswith("k") else 1
        try:
            v = int(s[:-1] if mult > 1 else s) * mult
        except ValueError:
            raise ConfigError(f"bad length {s!r}") from None
        if v < 1:
            raise ConfigError(f"length must be >= 1, got {v}")
        return v

    spec = spec.strip()
    if ".." in spec:
        lo, hi = (num(p) for p in spec.split("..", 1))
        if hi < lo:
            raise ConfigError(f"empty length range {spec!r}")
        out = []
        L = lo
        while L <= hi:
            out.append(L)
            L *= 2
        return out
    return [num(p) for p in spec.split(",") if p.strip()]
