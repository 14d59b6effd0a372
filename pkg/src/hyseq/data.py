"""FASTA ingestion, interval sampling with chromosome splits, and synthetic
sequence sources used for desk-scale experiments."""
from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import tokenizer as tok
from .errors import ConfigError, DataError, FormatError

NUCS = "ACGT"


# ---------------------------------------------------------------------------
# FASTA

class GenomeStore:
    """Immutable name -> sequence map. Sequences are kept as ASCII bytes."""

    def __init__(self, records: dict[str, bytes]):
        self._records = {k: bytes(v) for k, v in records.items()}

    @property
    def names(self) -> list[str]:
        return list(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, name) -> bool:
        return name in self._records

    def length(self, name: str) -> int:
        return len(self._records[name])

    @property
    def lengths(self) -> dict[str, int]:
        return {k: len(v) for k, v in self._records.items()}

    def slice(self, name: str, a: int, b: int) -> str:
        if name not in self._records:
            raise KeyError(f"no record named {name!r}")
        n = len(self._records[name])
        if not 0 <= a <= b <= n:
            raise IndexError(f"slice [{a}, {b}) outside record {name!r} of length {n}")
        return self._records[name][a:b].decode("ascii")

    def sequence(self, name: str) -> str:
        return self._records[name].decode("ascii")

    def total_length(self) -> int:
        return sum(len(v) for v in self._records.values())


def _lines(source) -> Iterator[str]:
    if isinstance(source, os.PathLike) or (
            isinstance(source, str) and not source.startswith(">") and "\n" not in source
            and os.path.exists(source)):
        with open(source, "r", encoding="ascii", errors="replace", newline="") as fh:
            yield from fh
        return
    if isinstance(source, str):
        yield from io.StringIO(source, newline="")
        return
    if isinstance(source, bytes):
        yield from io.StringIO(source.decode("ascii", errors="replace"), newline="")
        return
    for line in source:
        yield line.decode("ascii", errors="replace") if isinstance(line, bytes) else line


def parse_fasta(source) -> GenomeStore:
    """Parse FASTA text from a path, a string, bytes or an iterable of lines.

    Record names are the header text up to the first whitespace. Line breaks
    may be LF or CRLF; whitespace inside sequence lines is dropped.
    """
    records: dict[str, bytearray] = {}
    name = None
    for lineno, raw in enumerate(_lines(source), 1):
        line = raw.rstrip("\r\n")
        if line.startswith(">"):
            if name is not None and not records[name]:
                raise FormatError(f"record {name!r} has no sequence (line {lineno})")
            parts = line[1:].split()
            if not parts:
                raise FormatError(f"empty header at line {lineno}")
            name = parts[0]
            if name in records:
                raise FormatError(f"duplicate record name {name!r} at line {lineno}")
            records[name] = bytearray()
            continue
        body = "".join(line.split())
        if not body:
            continue
        if name is None:
            raise FormatError(f"sequence data before the first header (line {lineno})")
        records[name] += body.encode("ascii", errors="replace")
    if name is not None and not records[name]:
        raise FormatError(f"record {name!r} has no sequence")
    if not records:
        raise FormatError("no FASTA records found")
    return GenomeStore({k: bytes(v) for k, v in records.items()})


def write_fasta(path, records: dict[str, str], width: int = 60) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for name, seq in records.items():
            fh.write(f">{name}\n")
            for i in range(0, len(seq), width):
                fh.write(seq[i:i + width] + "\n")


# ---------------------------------------------------------------------------
# interval sampling

@dataclass
class IntervalSampler:
    """Uniform (chromosome, start) windows of exactly ``length`` tokens.

    The chromosome is drawn uniformly from ``chromosomes``; the start is
    uniform over the positions that keep the window inside the record, or 0
    when the record is shorter than the window, in which case the tail is
    padded with N.
    """

    chromosomes: Sequence[str]
    length: int
    seed: int = 0
    pad: str = "N"
    exclude: Sequence[str] = ()
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.length <= 0:
            raise ConfigError(f"sample length must be positive, got {self.length}")
        if not self.chromosomes:
            raise ConfigError("interval sampler needs at least one chromosome")
        clash = set(self.chromosomes) & set(self.exclude)
        if clash:
            raise ConfigError(f"chromosomes {sorted(clash)} are both allowed and excluded")
        self.chromosomes = list(self.chromosomes)
        self.rng = np.random.default_rng(self.seed)

    def sample(self, store: GenomeStore) -> tuple[np.ndarray, dict]:
        L = self.length
        name = self.chromosomes[int(self.rng.integers(len(self.chromosomes)))]
        assert name not in self.exclude
        n = store.length(name)
        start = int(self.rng.integers(n - L + 1)) if n >= L else 0
        seq = store.slice(name, start, min(n, start + L))
        if len(seq) < L:
            seq = seq + self.pad * (L - len(seq))
        return tok.encode(seq), {"chrom": name, "start": start, "padded": L - min(n, L)}

    def batch(self, store: GenomeStore, n: int) -> np.ndarray:
        return np.stack([self.sample(store)[0] for _ in range(n)])

    def tile(self, store: GenomeStore) -> Iterator[tuple[np.ndarray, dict]]:
        """Non-overlapping windows covering each chromosome in order (last one N-padded)."""
        L = self.length
        for name in self.chromosomes:
            n = store.length(name)
            for start in range(0, n, L):
                seq = store.slice(name, start, min(n, start + L))
                seq = seq + self.pad * (L - len(seq))
                yield tok.encode(seq), {"chrom": name, "start": start, "padded": L - (min(n, start + L) - start)}


def chromosome_split(store: GenomeStore, test: Iterable[str], length: int, seed: int = 0):
    """Train and test samplers over disjoint chromosome sets."""
    test = [t for t in test]
    missing = [t for t in test if t not in store]
    if missing:
        raise ConfigError(f"test chromosomes not in genome: {missing}")
    train = [n for n in store.names if n not in set(test)]
    if not train or not test:
        raise ConfigError("both the train and the test split need at least one chromosome")
    tr = IntervalSampler(train, length, seed, exclude=test)
    te = IntervalSampler(test, length, seed + 1, exclude=train)
    assert not set(tr.chromosomes) & set(te.chromosomes)
    return tr, te


# ---------------------------------------------------------------------------
# Markov sources

def stationary(P: np.ndarray) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix."""
    P = np.asarray(P, dtype=np.float64)
    w, v = np.linalg.eig(P.T)
    i = int(np.argmin(np.abs(w - 1)))
    pi = np.real(v[:, i])
    return pi / pi.sum()


def entropy_rate(P: np.ndarray, order: int = 1) -> float:
    """Entropy rate in nats of an order-k chain over 4 symbols.

    ``P`` has shape [4**order, 4]; row r is the next-symbol distribution
    after the context whose base-4 digits are r (most recent symbol last).
    """
    P = np.asarray(P, dtype=np.float64)
    S = P.shape[0]
    # lift to a first-order chain on contexts
    M = np.zeros((S, S))
    for r in range(S):
        for a in range(4):
            M[r, (r * 4 + a) % S] += P[r, a]
    pi = stationary(M)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(P > 0, P * np.log(P), 0.0).sum(axis=1)
    return float(pi @ h)


def sample_markov(P: np.ndarray, order: int, n: int, L: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` sequences of ``L`` nucleotide ids drawn from an order-k chain.

    The first ``order`` symbols are uniform.
    """
    P = np.asarray(P, dtype=np.float64)
    S = 4 ** order
    cdf = np.cumsum(P, axis=1)
    cdf[:, -1] = 1.0
    out = np.empty((n, L), dtype=np.int64)
    u = rng.random((n, L))
    sym = np.minimum((u[:, :order] * 4).astype(np.int64), 3)
    out[:, :order] = sym
    ctx = np.zeros(n, dtype=np.int64)
    for j in range(min(order, L)):
        ctx = (ctx * 4 + sym[:, j]) % S
    for t in range(order, L):
        a = (u[:, t:t + 1] >= cdf[ctx]).sum(axis=1)
        out[:, t] = a
        ctx = (ctx * 4 + a) % S
    return out + tok.A


def random_transitions(order: int, rng: np.random.Generator, alpha: float = 1.0) -> np.ndarray:
    return rng.dirichlet(np.full(4, alpha), size=4 ** order)


def order1_chain(entropy_target: float | None = None, seed: int = 0) -> np.ndarray:
    """A fixed-seed random order-1 transition matrix, optionally sharpened to
    a target entropy rate (nats) by bisection on a temperature."""
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((4, 4)) * 1.5
    if entropy_target is None:
        P = np.exp(logits)
        return P / P.sum(axis=1, keepdims=True)
    if not 0 < entropy_target < math.log(4):
        raise ValueError("entropy target must lie in (0, ln 4)")

    def chain(beta):
        P = np.exp(beta * logits)
        return P / P.sum(axis=1, keepdims=True)

    lo, hi = 0.0, 50.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if entropy_rate(chain(mid)) > entropy_target:
            lo = mid
        else:
            hi = mid
    return chain(0.5 * (lo + hi))


@dataclass
class SyntheticSource:
    """Deterministic generator description; ``kind`` selects the task."""

    kind: str
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("markov_species", "long_range_copy", "motif_classification"):
            raise ConfigError(f"unknown synthetic source {self.kind!r}")


@dataclass
class SpeciesTask:
    transitions: np.ndarray          # [n_species, 16, 4]
    separation: float

    @property
    def n_species(self) -> int:
        return self.transitions.shape[0]

    def sample(self, n: int, L: int, rng: np.random.Generator, labels=None):
        """Balanced labels (cycled) unless given; returns (labels, ids[n, L])."""
        if labels is None:
            labels = np.arange(n) % self.n_species
            labels = labels[rng.permutation(n)]
        labels = np.asarray(labels, dtype=np.int64)
        ids = np.empty((n, L), dtype=np.int64)
        for s in range(self.n_species):
            idx = np.nonzero(labels == s)[0]
            if idx.size:
                ids[idx] = sample_markov(self.transitions[s], 2, idx.size, L, rng)
        return labels, ids

    def log_likelihoods(self, ids: np.ndarray) -> np.ndarray:
        """Exact per-species log-likelihood of each sequence (oracle classifier)."""
        x = np.asarray(ids) - tok.A
        ctx = x[:, :-2] * 4 + x[:, 1:-1]
        nxt = x[:, 2:]
        logP = np.log(self.transitions)
        return np.stack([logP[s][ctx, nxt].sum(axis=1) for s in range(self.n_species)], axis=1)

    def mean_tv(self) -> float:
        """Mean pairwise total-variation distance between species' transition rows."""
        T = self.transitions
        d = [0.5 * np.abs(T[i] - T[j]).sum(axis=1).mean()
             for i in range(len(T)) for j in range(i + 1, len(T))]
        return float(np.mean(d)) if d else 0.0


def gen_markov_species(n_species: int, separation: float = 0.5, seed: int = 0,
                       alpha: float = 0.5) -> SpeciesTask:
    """``n_species`` order-2 chains P_s = (1 - sep) Q + sep R_s.

    Q is a shared random chain and R_s are species-specific random chains, so
    ``separation`` scales every pairwise total-variation distance linearly:
    0 gives identical sources, 1 gives independent random chains.
    """
    if n_species < 2:
        raise ConfigError("need at least two species")
    if not 0.0 <= separation <= 1.0:
        raise ConfigError("separation must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    Q = random_transitions(2, rng, alpha=4.0)
    R = np.stack([random_transitions(2, rng, alpha=alpha) for _ in range(n_species)])
    T = (1 - separation) * Q[None] + separation * R
    T = np.clip(T, 1e-6, None)
    return SpeciesTask(T / T.sum(axis=-1, keepdims=True), separation)


def unigram_classifier_accuracy(train_labels, train_ids, test_labels, test_ids) -> float:
    """Nearest-centroid classifier on nucleotide frequencies (count-based oracle)."""
    def freqs(ids):
        ids = np.asarray(ids) - tok.A
        return np.stack([(ids == a).mean(axis=1) for a in range(4)], axis=1)

    ftr, fte = freqs(train_ids), freqs(test_ids)
    classes = np.unique(train_labels)
    cent = np.stack([ftr[np.asarray(train_labels) == c].mean(axis=0) for c in classes])
    pred = classes[np.argmin(((fte[:, None] - cent[None]) ** 2).sum(-1), axis=1)]
    return float((pred == np.asarray(test_labels)).mean())


# ---------------------------------------------------------------------------
# long-range copy

@dataclass
class CopyBatch:
    ids: np.ndarray       # [n, L] model inputs
    targets: np.ndarray   # [n, L] next-token target at answer positions, -100 elsewhere
    answer: np.ndarray    # [n, L] bool, True where a target is set


def gen_long_range_copy(n: int, L: int, horizon: int, rng: np.random.Generator,
                        events: int | None = None) -> CopyBatch:
    """Recall a value seen ``horizon`` positions earlier.

    Each event writes ``SEP v`` at positions p, p+1 and ``SEP v`` again at
    p + horizon, p + horizon + 1 over a background of uniform nucleotides.
    The answer position is p + horizon: its next-token target is v, which is
    the token ``horizon`` steps before the target. When ``horizon + 2 > L``
    the first half of each event lies before the window, so the answer is
    not determined by anything the model can see.

    One event per sequence (the default) leaves a single earlier ``SEP`` in
    view of each answer. With several events the recalled value has to be
    told apart from the other events' values by lag alone.
    """
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    covered = horizon + 2 <= L
    total = L if covered else L + horizon
    off = total - L
    if events is None:
        events = 1
    ids = rng.integers(tok.A, tok.T + 1, size=(n, total))
    targets = np.full((n, L), -100, dtype=np.int64)
    answer = np.zeros((n, L), dtype=bool)
    # answer positions q (window coords) in [lo, L - 2]
    lo = horizon if covered else 0
    span = L - 1 - lo
    for i in range(n):
        used = np.zeros(total, dtype=bool)
        placed = 0
        for _ in range(events * 20):
            if placed == events:
                break
            q = off + lo + int(rng.integers(span))
            p = q - horizon
            cells = [p, p + 1, q, q + 1]
            if used[cells].any():
                continue
            v = int(rng.integers(tok.A, tok.T + 1))
            ids[i, p], ids[i, p + 1], ids[i, q], ids[i, q + 1] = tok.SEP, v, tok.SEP, v
            used[cells] = True
            targets[i, q - off] = v
            answer[i, q - off] = True
            placed += 1
    return CopyBatch(ids[:, off:].copy(), targets, answer)


# ---------------------------------------------------------------------------
# motif classification

def gen_motif_classification(n: int, L: int, rng: np.random.Generator,
                             motifs: Sequence[str] = ("AAAAAAAA", "CCCCCCCC"),
                             copies: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Uniform background with ``copies`` insertions of the class motif.

    Returns (labels, ids). Classes are balanced. A long homopolymer is rare in
    uniform background, so motif counts separate the classes linearly.
    """
    k = len(motifs)
    labels = (np.arange(n) % k)[rng.permutation(n)]
    ids = rng.integers(tok.A, tok.T + 1, size=(n, L))
    for i, c in enumerate(labels):
        m = tok.encode(motifs[c])
        if len(m) > L:
            raise ConfigError("motif longer than the sequence")
        for _ in range(copies):
            s = int(rng.integers(L - len(m) + 1))
            ids[i, s:s + len(m)] = m
    return labels.astype(np.int64), ids


def gen_composition_classification(n: int, L: int, rng: np.random.Generator,
                                   bias: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Binary task: class 0 is A/T-rich, class 1 is C/G-rich by ``bias`` in each base pair."""
    labels = (np.arange(n) % 2)[rng.permutation(n)]
    p_at = np.where(labels == 0, 0.5 + bias, 0.5 - bias) / 2
    probs = np.stack([p_at, 0.5 - p_at, 0.5 - p_at, p_at], axis=1)  # A C G T
    u = rng.random((n, L))
    cdf = np.cumsum(probs, axis=1)
    sym = (u[:, :, None] >= cdf[:, None, :3]).sum(axis=-1)
    return labels.astype(np.int64), sym + tok.A


def gen_two_factor_composition(n: int, L: int, rng: np.random.Generator, bias: float = 0.2):
    """Sequences with independent A/T-vs-C/G and purine-vs-pyrimidine skews.

    Each row draws two signs: ``at_rich`` sets the A+T fraction to
    0.5 +/- bias and ``purine_rich`` sets the A+G fraction the same way,
    with base probabilities the product of the two (A = AT and purine,
    T = AT and pyrimidine, G = GC and purine, C = GC and pyrimidine).
    Returns (at_rich, purine_rich, ids); both label vectors are balanced
    and independent of each other.
    """
    if not 0 <= bias < 0.5:
        raise ConfigError("bias must lie in [0, 0.5)")
    at = (np.arange(n) % 2)[rng.permutation(n)].astype(bool)
    pu = rng.permutation((np.arange(n) // 2 + np.arange(n)) % 2 if n else np.zeros(0, int)).astype(bool)
    f1 = np.where(at, 0.5 + bias, 0.5 - bias)
    f2 = np.where(pu, 0.5 + bias, 0.5 - bias)
    probs = np.stack([f1 * f2, (1 - f1) * (1 - f2), (1 - f1) * f2, f1 * (1 - f2)], axis=1)  # A C G T
    cdf = np.cumsum(probs, axis=1)
    sym = (rng.random((n, L))[:, :, None] >= cdf[:, None, :3]).sum(axis=-1)
    return at.astype(np.int64), pu.astype(np.int64), sym + tok.A


# ---------------------------------------------------------------------------
# labeled text files

def write_labeled(path, labels, seqs) -> None:
    """``label<TAB>sequence`` lines, UTF-8, LF endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for y, s in zip(labels, seqs):
            if not isinstance(s, str):
                s = tok.decode(s)
            fh.write(f"{int(y)}\t{s}\n")


def read_labeled(path) -> tuple[np.ndarray, list[str]]:
    labels, seqs = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'label<TAB>sequence'")
            try:
                labels.append(int(parts[0]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: label {parts[0]!r} is not an integer") from None
            seqs.append(parts[1])
    return np.asarray(labels, dtype=np.int64), seqs


def encode_batch(seqs: Sequence[str], L: int | None = None, pad_id: int = tok.N) -> np.ndarray:
    """Encode and right-pad (with N) or truncate to a common length."""
    enc = [tok.encode(s) for s in seqs]
    L = L if L is not None else max(len(e) for e in enc)
    out = np.full((len(enc), L), pad_id, dtype=np.int64)
    for i, e in enumerate(enc):
        out[i, :min(L, len(e))] = e[:L]
    return out
