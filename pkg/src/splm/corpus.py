"""27-symbol character corpus: normalization, tokenization, splits, batching.

The alphabet is the 26 lowercase letters plus the space character. Ids are
fixed as a=0 .. z=25, space=26 so that corpora and checkpoints written on
one machine mean the same thing on another.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VOCAB_SIZE = 27
SPACE_ID = 26

_MAGIC = b"SPLM"
_VERSION = 1

# id -> symbol
_SYMBOLS = "abcdefghijklmnopqrstuvwxyz "
_ID_OF = {c: i for i, c in enumerate(_SYMBOLS)}

# Precomputed 256-entry byte translation table: lowercase letters keep their
# rank, everything else (digits included) collapses to a single space.
_BYTE_MAP = np.full(256, SPACE_ID, dtype=np.uint8)
for _c in range(26):
    _BYTE_MAP[ord("a") + _c] = _c
    _BYTE_MAP[ord("A") + _c] = _c


def normalize(raw) -> str:
    """Lowercase and map every character outside a-z to a single space.

    Lossy by design and idempotent: normalize(normalize(x)) == normalize(x).
    Accepts str or bytes; non-ASCII characters also collapse to space.
    """
    if isinstance(raw, bytes):
        ids = _BYTE_MAP[np.frombuffer(raw, dtype=np.uint8)]
        return "".join(_SYMBOLS[i] for i in ids)
    return "".join(
        ch if "a" <= ch <= "z" else (ch.lower() if "A" <= ch <= "Z" else " ")
        for ch in raw
    )


def encode(text: str) -> np.ndarray:
    """Map normalized text to uint8 ids; raises on out-of-alphabet symbols."""
    try:
        return np.array([_ID_OF[c] for c in text], dtype=np.uint8)
    except KeyError as exc:
        raise ValueError(f"symbol {exc.args[0]!r} is outside the alphabet; "
                         "normalize the text first") from None


def decode(ids) -> str:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= VOCAB_SIZE):
        raise ValueError("token id out of range")
    return "".join(_SYMBOLS[i] for i in ids)


@dataclass
class CorpusSplit:
    """Train/dev/test id arrays plus a checksum of the tokenized source."""

    train: np.ndarray
    dev: np.ndarray
    test: np.ndarray
    checksum: str

    def __post_init__(self):
        for part in (self.train, self.dev, self.test):
            if part.dtype != np.uint8:
                raise ValueError("split arrays must be uint8")


def _checksum(*parts: np.ndarray) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.tobytes())
    return h.hexdigest()


def split_corpus(ids: np.ndarray, ratios=(0.90, 0.05, 0.05)) -> CorpusSplit:
    """Contiguous split in corpus order; train/dev sizes rounded, test gets the rest."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    n = len(ids)
    n_train = round(n * ratios[0])
    n_dev = round(n * ratios[1])
    if n_train + n_dev > n:
        raise ValueError("corpus too small for requested ratios")
    train = np.ascontiguousarray(ids[:n_train])
    dev = np.ascontiguousarray(ids[n_train:n_train + n_dev])
    test = np.ascontiguousarray(ids[n_train + n_dev:])
    return CorpusSplit(train, dev, test, _checksum(train, dev, test))


def prepare(text_path, out_path) -> CorpusSplit:
    """Normalize + tokenize a raw text file and persist the three splits."""
    raw = Path(text_path).read_bytes()
    ids = encode(normalize(raw))
    if len(ids) < 4:
        raise ValueError("corpus file too small to split")
    cs = split_corpus(ids)
    save_split(cs, out_path)
    return cs


def save_split(cs: CorpusSplit, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(bytes([_VERSION]))
        fh.write(struct.pack("<QQQ", len(cs.train), len(cs.dev), len(cs.test)))
        fh.write(cs.train.tobytes())
        fh.write(cs.dev.tobytes())
        fh.write(cs.test.tobytes())


def load_split(path) -> CorpusSplit:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a corpus split file (bad magic)")
    if blob[4] != _VERSION:
        raise ValueError(f"{path}: unsupported split format version {blob[4]}")
    n_train, n_dev, n_test = struct.unpack_from("<QQQ", blob, 5)
    body = 5 + 24
    if len(blob) != body + n_train + n_dev + n_test:
        raise ValueError(f"{path}: truncated corpus split file")
    train = np.frombuffer(blob, dtype=np.uint8, count=n_train, offset=body).copy()
    dev = np.frombuffer(blob, dtype=np.uint8, count=n_dev, offset=body + n_train).copy()
    test = np.frombuffer(blob, dtype=np.uint8, count=n_test,
                         offset=body + n_train + n_dev).copy()
    if train.size and train.max() >= VOCAB_SIZE:
        raise ValueError(f"{path}: token id out of range")
    return CorpusSplit(train, dev, test, _checksum(train, dev, test))


def batch_at(ids: np.ndarray, context_len: int, batch: int, seed: int, step: int):
    """The training batch for a given step, a pure function of (seed, step).

    Window offsets are drawn from an RNG keyed on both numbers, so a resumed
    run regenerates exactly the batches the interrupted run would have seen.
    """
    n = len(ids)
    if context_len >= n:
        raise ValueError("context_len must be smaller than the split")
    rng = np.random.default_rng(np.random.SeedSequence([seed, step]))
    starts = rng.integers(0, n - context_len, size=batch)
    inputs = np.stack([ids[s:s + context_len] for s in starts]).astype(np.int64)
    targets = np.stack([ids[s + 1:s + context_len + 1] for s in starts]).astype(np.int64)
    return inputs, targets


def batch_iter(ids: np.ndarray, context_len: int, batch: int, seed: int,
               sequential: bool = False):
    """Yield (inputs, targets) batches of next-token windows.

    Random offsets by default (training); with sequential=True the corpus is
    walked once in non-overlapping context-length strides (evaluation), so
    each position appears at most once per pass.
    """
    n = len(ids)
    if context_len >= n:
        raise ValueError("context_len must be smaller than the split")
    if sequential:
        starts = range(0, n - context_len, context_len)
        buf = []
        for s in starts:
            buf.append(s)
            if len(buf) == batch:
                yield (np.stack([ids[s:s + context_len] for s in buf]).astype(np.int64),
                       np.stack([ids[s + 1:s + context_len + 1] for s in buf]).astype(np.int64))
                buf = []
        if buf:
            yield (np.stack([ids[s:s + context_len] for s in buf]).astype(np.int64),
                   np.stack([ids[s + 1:s + context_len + 1] for s in buf]).astype(np.int64))
        return

    step = 0
    while True:
        yield batch_at(ids, context_len, batch, seed, step)
        step += 1
