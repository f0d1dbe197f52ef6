"""Non-causal spectral reweighting via the orthonormal DCT-II.

Each embedding coordinate of a classifier layer, read across the token
axis, is transformed to L cosine coefficients, scaled by learned weights
(one per coefficient, per layer), and transformed back, replacing the
original signal. Orthonormal scaling makes the inverse the transpose, so
all-ones weights are an exact identity and the layers start as no-ops.

`dct2`/`idct2` accumulate terms in ascending index order with a math.cos
basis, matching naive double-loop references bit for bit; the classifier
uses the equivalent matrix route for whole batches.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from splm import tensor as T
from splm.nn import LayerNorm, Linear, Module, TransformerBlock
from splm.tensor import Tensor


@lru_cache(maxsize=32)
def _cos_table(length: int) -> np.ndarray:
    tab = np.empty((length, length))
    for k in range(length):
        for n in range(length):
            tab[k, n] = math.cos(math.pi * (n + 0.5) * k / length)
    return tab


@lru_cache(maxsize=32)
def _scales(length: int) -> np.ndarray:
    s = np.full(length, math.sqrt(2.0 / length))
    s[0] = math.sqrt(1.0 / length)
    return s


def basis_matrix(length: int) -> np.ndarray:
    """Orthonormal analysis matrix C; dct2(x) = C @ x, idct2(X) = C.T @ X."""
    return _scales(length)[:, None] * _cos_table(length)


def dct2(x: Tensor) -> Tensor:
    """X[k] = s_k * sum_n x[n] cos(pi (n+1/2) k / L), terms in ascending n."""
    if x.ndim != 1:
        raise ValueError("dct2 expects a 1-D signal")
    length = x.shape[0]
    tab, s = _cos_table(length), _scales(length)
    acc = np.zeros(length, dtype=x.dtype)
    for n in range(length):
        acc = acc + x.data[n] * tab[:, n]
    out = s * acc

    def grad_fn(g):
        return (tab.T @ (s * g),)

    return T._from_op(out, "dct2", (x,), grad_fn)


def idct2(c: Tensor) -> Tensor:
    """x[n] = sum_k s_k X[k] cos(pi (n+1/2) k / L), terms in ascending k."""
    if c.ndim != 1:
        raise ValueError("idct2 expects a 1-D coefficient vector")
    length = c.shape[0]
    tab, s = _cos_table(length), _scales(length)
    out = np.zeros(length, dtype=c.dtype)
    for k in range(length):
        out = out + (s[k] * c.data[k]) * tab[k, :]

    def grad_fn(g):
        return (s * (tab @ g),)

    return T._from_op(out, "idct2", (c,), grad_fn)


def spectral_reweight(e: Tensor, weights: Tensor) -> Tensor:
    """e' = idct2(w * dct2(e)): amplify or suppress cosine components."""
    if weights.shape != e.shape:
        raise ValueError("one weight per DCT coefficient required")
    return idct2(weights * dct2(e))


class DctLayer(Module):
    """Per-layer coefficient weights applied to every coordinate of [B, L, E]."""

    def __init__(self, length: int):
        self.weights = Tensor(np.ones(length), requires_grad=True)
        self.length = length

    def __call__(self, x: Tensor) -> Tensor:
        nb, length, width = x.shape
        if length != self.length:
            raise ValueError("sequence length does not match DCT weight count")
        basis = Tensor(basis_matrix(length))
        coeff = basis @ x  # [L,L] @ [B,L,E] broadcasts over the batch
        coeff = coeff * self.weights.reshape(length, 1)
        return T.transpose(basis, (1, 0)) @ coeff


@dataclass
class ClassifierConfig:
    n_layers: int = 6
    d_model: int = 64
    n_heads: int = 8
    d_ff: int = 256
    n_tokens: int = 40
    in_dim: int = 16
    classes: int = 4
    use_dct: bool = True
    loss: str = "huber"  # or "cross_entropy"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.loss not in ("huber", "cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")


class SequenceClassifier(Module):
    """Non-causal encoder over token sequences with per-layer DCT reweighting."""

    def __init__(self, config: ClassifierConfig, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDC7]))
        self.config = config
        c = config
        self.in_proj = Linear(c.in_dim, c.d_model, rng)
        self.pos_emb = Tensor(rng.normal(0, 0.02, (c.n_tokens, c.d_model)),
                              requires_grad=True)
        self.blocks = [TransformerBlock(c.d_model, c.n_heads, c.d_ff, rng,
                                        causal=False)
                       for _ in range(c.n_layers)]
        # weights start at 1 (identity), so they consume no rng draws and a
        # dct-free twin built from the same seed shares all other parameters
        self.dct_layers = ([DctLayer(c.n_tokens) for _ in range(c.n_layers)]
                           if c.use_dct else [])
        self.final_ln = LayerNorm(c.d_model)
        self.out = Linear(c.d_model, c.classes, rng, zero_init=True)

    def __call__(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        nb, length, dim = x.shape
        c = self.config
        if length != c.n_tokens or dim != c.in_dim:
            raise ValueError(f"expected [B, {c.n_tokens}, {c.in_dim}] input")
        h = self.in_proj(x) + self.pos_emb
        for i, block in enumerate(self.blocks):
            h = block(h)
            if self.dct_layers:
                h = self.dct_layers[i](h)
        pooled = self.final_ln(h).mean(axis=1)
        return self.out(pooled)

    def loss(self, logits: Tensor, labels: np.ndarray) -> Tensor:
        if self.config.loss == "cross_entropy":
            return T.cross_entropy(logits, labels)
        onehot = np.eye(self.config.classes)[np.asarray(labels)]
        return T.huber(T.softmax(logits, axis=-1), onehot)

    def freeze_dct(self) -> None:
        for layer in self.dct_layers:
            layer.weights.requires_grad = False


def accuracy(model: SequenceClassifier, data: np.ndarray,
             labels: np.ndarray, batch: int = 64) -> float:
    hits = 0
    with T.no_grad():
        for i in range(0, len(data), batch):
            logits = model(data[i:i + batch]).data
            hits += int((logits.argmax(axis=1) == labels[i:i + batch]).sum())
    return hits / len(data)


# ---------------------------------------------------------------------------
# synthetic planted-frequency classification task

_SPDS_MAGIC = b"SPDS"
_SPDS_VERSION = 1


def class_frequencies(classes: int, length: int) -> list:
    """Well-separated DCT bin indices, one per class."""
    if classes < 2 or classes >= length:
        raise ValueError("need 2 <= classes < sequence length")
    return [round((c + 1) * length / (classes + 1)) for c in range(classes)]


def synth_dataset(n: int, length: int = 40, dim: int = 16, classes: int = 4,
                  noise: float = 0.3, seed: int = 0):
    """Sequences of patch vectors whose label is the dominant token-axis
    oscillation frequency of a planted cosine component.

    Returns (data [n, length, dim] float64, labels [n] int64).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5D5]))
    freqs = class_frequencies(classes, length)
    t = np.arange(length)
    labels = rng.integers(0, classes, size=n)
    data = noise * rng.standard_normal((n, length, dim))
    for i in range(n):
        direction = rng.standard_normal(dim)
        direction /= np.linalg.norm(direction)
        amp = rng.uniform(0.8, 1.2)
        wave = np.cos(math.pi * (t + 0.5) * freqs[labels[i]] / length)
        data[i] += amp * wave[:, None] * direction
    return data, labels.astype(np.int64)


def save_dataset(path, data: np.ndarray, labels: np.ndarray,
                 classes: int) -> None:
    n, length, dim = data.shape
    if classes > 255:
        raise ValueError("at most 255 classes in this format")
    with open(path, "wb") as fh:
        fh.write(_SPDS_MAGIC)
        fh.write(bytes([_SPDS_VERSION]))
        fh.write(struct.pack("<IIII", n, length, dim, classes))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())
        fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_dataset(path):
    blob = Path(path).read_bytes()
    if blob[:4] != _SPDS_MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    if blob[4] != _SPDS_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {blob[4]}")
    n, length, dim, classes = struct.unpack_from("<IIII", blob, 5)
    off = 5 + 16
    expected = off + n + n * length * dim * 8
    if len(blob) != expected:
        raise ValueError(f"{path}: truncated dataset file")
    labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=off)
    data = np.frombuffer(blob, dtype="<f8", count=n * length * dim,
                         offset=off + n).reshape(n, length, dim)
    return data.copy(), labels.astype(np.int64), classes


def fit_classifier(model: SequenceClassifier, data: np.ndarray,
                   labels: np.ndarray, steps: int, batch: int = 32,
                   lr: float = 1e-3, seed: int = 0, warmup: int = 50,
                   grad_clip: float = 1.0, progress=None) -> None:
    from splm.training import Adam, clip_global_norm

    params = {k: p for k, p in model.params().items() if p.requires_grad}
    opt = Adam(params, lr=lr, warmup_steps=warmup)
    n = len(data)
    for step in range(steps):
        rng = np.random.default_rng(np.random.SeedSequence([seed, step]))
        idx = rng.integers(0, n, size=batch)
        model.zero_grads()
        loss = model.loss(model(data[idx]), labels[idx])
        if not np.isfinite(loss.item()):
            raise RuntimeError(f"non-finite classifier loss at step {step}")
        T.backward(loss)
        clip_global_norm(params, grad_clip)
        opt.step()
        if progress:
            progress(step, loss.item())
