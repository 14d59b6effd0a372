"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic   8 bytes  b"HYSQCKPT"
    version u32
    config  u32 byte count, UTF-8 text (the run's config file, verbatim)
    count   u32 number of records
    record  u16 name length, UTF-8 name, u8 dtype tag, u8 rank,
            rank x u64 extents, raw little-endian values
    digest  32 bytes sha256 of everything before it

Arrays round-trip bit-exactly. Non-array state (rng states, counters) is
stored as a JSON document in the uint8 record ``__meta__``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"HYSQCKPT"
VERSION = 1
META_KEY = "__meta__"

_TAGS = {0: "<f4", 1: "<f8", 2: "<i8", 3: "|u1", 4: "<i4", 5: "<c8", 6: "<c16", 7: "|b1"}
_TAG_OF = {np.dtype(v).str if v[0] != "|" else np.dtype(v).str: k for k, v in _TAGS.items()}


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    config_text: str = ""
    meta: dict = field(default_factory=dict)


def _tag(a: np.ndarray) -> int:
    key = a.dtype.newbyteorder("<").str if a.dtype.byteorder not in ("|",) else a.dtype.str
    if key not in _TAG_OF:
        raise FormatError(f"dtype {a.dtype} cannot be stored in a checkpoint")
    return _TAG_OF[key]


def to_bytes(ck: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = ck.config_text.encode("utf-8")
    parts += [struct.pack("<I", len(cfg)), cfg]
    arrays = dict(ck.arrays)
    if ck.meta:
        arrays[META_KEY] = np.frombuffer(json.dumps(ck.meta, sort_keys=True).encode("utf-8"),
                                         dtype=np.uint8)
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        a = np.asarray(arr)
        tag = _tag(a)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", tag, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype=np.dtype(_TAGS[tag])).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < len(MAGIC) + 4 + 32 or buf[:len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checkpoint digest mismatch (truncated or corrupted file)")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise FormatError("checkpoint truncated")
        out = body[pos:pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (n_cfg,) = struct.unpack("<I", take(4))
    config_text = take(n_cfg).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<H", take(2))
        name = take(n_name).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in _TAGS:
            raise FormatError(f"unknown dtype tag {tag} for {name!r}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = np.dtype(_TAGS[tag])
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arrays[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    if pos != len(body):
        raise FormatError("trailing bytes after the last record")
    meta = {}
    if META_KEY in arrays:
        meta = json.loads(arrays.pop(META_KEY).tobytes().decode("utf-8"))
    return Checkpoint(arrays, config_text, meta)


def save(path, ck: Checkpoint) -> str:
    """Write ``ck`` to ``path``; returns the sha256 hex digest of the file."""
    data = to_bytes(ck)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def rng_state(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return json.loads(json.dumps(st))


def rng_from_state(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)
