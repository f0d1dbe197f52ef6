"""Token-varying filter weights from a small causal mask decoder.

A single-layer causal transformer reads the M-channel time-frequency
representation of a signal and emits per-token, per-channel weights W[t][k]
that replace the static mix weights, in the spirit of time-frequency
masking in source separation: the mask depends on the signal itself.

The output projection and the positional table start at zero, so a fresh
decoder emits W = 0 everywhere (the filtered branch starts as an exact
identity) and a zero input yields weights constant across tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from splm import tensor as T
from splm.filters import FilterBank, decompose
from splm.nn import Linear, Module, TransformerBlock
from splm.tensor import Tensor


@dataclass
class MaskDecoderConfig:
    in_channels: int = 144
    bottleneck: int = 32
    heads: int = 4
    d_ff: int = 128
    max_len: int = 256

    def __post_init__(self):
        if self.bottleneck % self.heads:
            raise ValueError("bottleneck must be divisible by heads")


class MaskDecoder(Module):
    def __init__(self, config: MaskDecoderConfig, rng):
        self.config = config
        self.in_proj = Linear(config.in_channels, config.bottleneck, rng)
        self.pos_emb = Tensor(np.zeros((config.max_len, config.bottleneck)),
                              requires_grad=True)
        self.block = TransformerBlock(config.bottleneck, config.heads,
                                      config.d_ff, rng, causal=True)
        self.out_proj = Linear(config.bottleneck, config.in_channels, rng,
                               zero_init=True)

    def weights_batch(self, tf: Tensor, chunk_rows: int = 128) -> Tensor:
        """[N, L, M] stacked signals -> [N, L, M] per-token channel weights.

        Each of the N signals is decoded independently, so the batch is
        processed in slices of chunk_rows, which bounds the largest single
        attention temporary at chunk_rows * heads * L^2 floats. The graph
        still retains every slice's activations until backward, so the
        total footprint scales with N either way. Slicing does not change
        any value: the result is bit-identical.
        """
        n, length, m = tf.shape
        if m != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} channels, got {m}")
        if length > self.config.max_len:
            raise ValueError("sequence longer than the decoder's positional table")
        pos = T.narrow(self.pos_emb, 0, 0, length)
        if n <= chunk_rows:
            return self.out_proj(self.block(self.in_proj(tf) + pos))
        parts = []
        for start in range(0, n, chunk_rows):
            part = T.narrow(tf, 0, start, min(chunk_rows, n - start))
            parts.append(self.out_proj(self.block(self.in_proj(part) + pos)))
        return T.concat(parts, axis=0)


def compute_token_weights(tf_rep: Tensor, decoder: MaskDecoder) -> Tensor:
    """W[t][k] for one signal's [M, L] time-frequency representation."""
    if tf_rep.ndim != 2:
        raise ValueError("compute_token_weights expects tf_rep[M, L]")
    m, length = tf_rep.shape
    seq = T.transpose(tf_rep, (1, 0)).reshape(1, length, m)
    return decoder.weights_batch(seq).reshape(length, m)


def mix_adaptive(tf_rep: Tensor, token_weights: Tensor) -> Tensor:
    """ft[t] = sum_k W[t][k] * tf[k][t], channels in ascending order."""
    return T.token_mix(tf_rep, token_weights)


def filter_adaptive(e: Tensor, bank: FilterBank, decoder: MaskDecoder,
                    token_weights: Tensor = None,
                    combine_static: bool = False) -> Tensor:
    """Token-varying filtering of one coordinate signal.

    W is computed from the decomposition unless passed in explicitly;
    combine_static multiplies the static w_k back in instead of replacing it.
    """
    tf = decompose(e, bank)
    if token_weights is None:
        token_weights = compute_token_weights(tf, decoder)
    if token_weights.shape != (tf.shape[1], tf.shape[0]):
        raise ValueError("token weights must be [L, M]")
    if combine_static:
        token_weights = token_weights * bank.mix_weights
    return mix_adaptive(tf, token_weights)


class AdaptiveFilterSite(Module):
    """Vectorised token-adaptive filtering over a batch: x[B,L,E] -> x + ft."""

    def __init__(self, bank: FilterBank, decoder: MaskDecoder,
                 combine_static: bool = False):
        self.bank = bank
        self.decoder = decoder
        self.combine_static = combine_static

    def __call__(self, x: Tensor) -> Tensor:
        from splm.filters import FilterSite  # shares the batched decompose

        nb, length, width = x.shape
        m = self.bank.config.channels
        tf = FilterSite(self.bank).decompose_batch(x)  # [B, L, E, M]
        # one sequence per (batch item, coordinate): [B*E, L, M]
        seqs = T.transpose(tf, (0, 2, 1, 3)).reshape(nb * width, length, m)
        w = self.decoder.weights_batch(seqs)
        if self.combine_static:
            w = w * self.bank.mix_weights
        ft = (w * seqs).sum(axis=-1)  # [B*E, L]
        ft = T.transpose(ft.reshape(nb, width, length), (0, 2, 1))
        return x + ft


def export_mask_csv(weights: np.ndarray, path) -> None:
    """Dump a token x channel |W| heatmap as CSV (header row = channel ids)."""
    import csv

    mags = np.abs(np.asarray(weights))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["token"] + [f"ch{k}" for k in range(mags.shape[1])])
        for t in range(mags.shape[0]):
            writer.writerow([t] + [repr(float(v)) for v in mags[t]])
