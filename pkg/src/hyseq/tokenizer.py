"""Single-nucleotide tokenizer with a fixed 10-entry vocabulary."""
from __future__ import annotations

import json

import numpy as np

from .errors import DomainError

PAD, SEP, UNK, BOS, EOS = 0, 1, 2, 3, 4
A, C, G, T, N = 5, 6, 7, 8, 9

VOCAB: dict[int, str] = {
    PAD: "[PAD]", SEP: "[SEP]", UNK: "[UNK]", BOS: "[BOS]", EOS: "[EOS]",
    A: "A", C: "C", G: "G", T: "T", N: "N",
}
VOCAB_SIZE = len(VOCAB)

# one glyph per id for decode(); specials render as single characters
_GLYPHS = {PAD: "·", SEP: "|", UNK: "?", BOS: "^", EOS: "$", A: "A", C: "C", G: "G", T: "T", N: "N"}

_ENCODE = np.full(256, UNK, dtype=np.int64)
for _ch, _id in (("A", A), ("C", C), ("G", G), ("T", T), ("N", N)):
    _ENCODE[ord(_ch)] = _id
    _ENCODE[ord(_ch.lower())] = _id

_COMPLEMENT_ID = {A: T, T: A, C: G, G: C, N: N}
_COMPLEMENT_CH = str.maketrans("ACGTNacgtn", "TGCANtgcan")


def encode(s: str) -> np.ndarray:
    """Map each character to its id; lowercase folds to uppercase, anything else is UNK."""
    raw = np.frombuffer(s.encode("ascii", errors="replace"), dtype=np.uint8)
    return _ENCODE[raw]


def decode(ids) -> str:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= VOCAB_SIZE):
        raise IndexError(f"token id out of range [0, {VOCAB_SIZE})")
    return "".join(_GLYPHS[int(i)] for i in ids)


def reverse_complement(seq):
    """Reverse complement of a nucleotide string or id array (A<->T, C<->G, N->N)."""
    if isinstance(seq, str):
        if seq.strip("ACGTNacgtn"):
            bad = sorted(set(seq) - set("ACGTNacgtn"))
            raise DomainError(f"non-nucleotide characters {bad}")
        return seq.translate(_COMPLEMENT_CH)[::-1]
    ids = np.asarray(seq, dtype=np.int64)
    if ids.size and not np.all((ids >= A) & (ids <= N)):
        raise DomainError("reverse complement is defined on nucleotide ids 5..9 only")
    table = np.arange(VOCAB_SIZE)
    for k, v in _COMPLEMENT_ID.items():
        table[k] = v
    return table[ids][..., ::-1].copy()


def vocab_json() -> str:
    return json.dumps({"vocab_size": VOCAB_SIZE, "ids": {str(k): v for k, v in VOCAB.items()}},
                      indent=2)


def write_vocab(path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(vocab_json() + "\n")
