"""Parameter containers and transformer building blocks.

Modules are plain objects holding Tensors; `params()` walks attributes in
definition order, so parameter naming (used by checkpoints) is stable.
"""

from __future__ import annotations

import math

import numpy as np

from splm import tensor as T
from splm.tensor import Tensor


class Module:
    def params(self) -> dict:
        """Flat name -> Tensor map over this module and its children."""
        out = {}
        for attr, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out[attr] = val
            elif isinstance(val, Module):
                for k, v in val.params().items():
                    out[f"{attr}.{k}"] = v
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for k, v in item.params().items():
                            out[f"{attr}.{i}.{k}"] = v
        return out

    def load_params(self, arrays: dict, prefix: str = "") -> None:
        own = self.params()
        for name, tensor in own.items():
            key = prefix + name
            if key not in arrays:
                raise ValueError(f"checkpoint missing parameter {key!r}")
            arr = np.asarray(arrays[key], dtype=tensor.data.dtype)
            if arr.shape != tensor.data.shape:
                raise ValueError(f"shape mismatch for {key!r}: "
                                 f"{arr.shape} vs {tensor.data.shape}")
            tensor.data = arr.copy()

    def zero_grads(self) -> None:
        for p in self.params().values():
            p.grad = None


def _param(rng, shape, scale=0.02) -> Tensor:
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, zero_init: bool = False):
        self.weight = _zeros((d_in, d_out)) if zero_init else _param(rng, (d_in, d_out))
        self.bias = _zeros(d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = _zeros(dim)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


def causal_mask(length: int) -> Tensor:
    """Additive mask: 0 on and below the diagonal, -inf above.

    -inf scores become exact zeros after softmax, so masked positions
    contribute nothing, bit for bit.
    """
    m = np.triu(np.full((length, length), -np.inf), k=1)
    return Tensor(m)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng, causal: bool = True):
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.causal = causal
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        nb, length, dim = x.shape
        heads, dh = self.n_heads, self.d_head

        def split(t):  # [B,L,D] -> [B,H,L,dh]
            return T.transpose(t.reshape(nb, length, heads, dh), (0, 2, 1, 3))

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        if self.causal:
            scores = scores + causal_mask(length)
        probs = T.softmax(scores, axis=-1)
        ctx = T.transpose(probs @ v, (0, 2, 1, 3)).reshape(nb, length, dim)
        return self.wo(ctx)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng):
        self.up = Linear(d_model, d_ff, rng)
        self.down = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(self.up(x).relu())


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + ff(ln(x))."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng,
                 causal: bool = True):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng, causal=causal)
        self.ln2 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.ff(self.ln2(x))
