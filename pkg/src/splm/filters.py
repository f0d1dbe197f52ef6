"""Learnable causal filterbanks over token-axis activation signals.

Each embedding coordinate of a layer's activations, read across the context
dimension, is treated as a discrete-time signal. A bank of M short causal
kernels decomposes it into channels (conv + ReLU), learned per-channel
weights mix the channels back into one signal, and the result is added to
the original as a residual. Kernels come in one length (single-scale) or in
four length groups trading temporal against spectral resolution.

The 1-D functions here (`decompose`, `filter_fixed`, `filter_multiscale`)
accumulate channels and taps in fixed ascending order so their outputs are
bit-identical to naive double-loop references; `FilterSite.apply` is the
vectorised route the model uses for whole batches.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from splm import tensor as T
from splm.nn import Module
from splm.tensor import Tensor

DEFAULT_CHANNELS = 144
SINGLE_SCALE_LENGTH = 7
MULTI_SCALE_LENGTHS = (3, 7, 15, 31)


@dataclass
class FilterConfig:
    """Channel count, per-channel kernel lengths, and placement sites."""

    channels: int = DEFAULT_CHANNELS
    kernel_lengths: tuple = ()
    placement: tuple = ()  # layer indices; filters run after these blocks

    @staticmethod
    def single_scale(channels: int = DEFAULT_CHANNELS,
                     length: int = SINGLE_SCALE_LENGTH,
                     placement=()) -> "FilterConfig":
        return FilterConfig(channels, (length,) * channels, tuple(placement))

    @staticmethod
    def multi_scale(channels: int = DEFAULT_CHANNELS,
                    lengths=MULTI_SCALE_LENGTHS,
                    placement=()) -> "FilterConfig":
        if channels % len(lengths):
            raise ValueError(f"channels must be divisible by {len(lengths)} "
                             "for the multi-scale bank")
        per = channels // len(lengths)
        kl = tuple(l for l in lengths for _ in range(per))
        return FilterConfig(channels, kl, tuple(placement))

    def __post_init__(self):
        if self.kernel_lengths and len(self.kernel_lengths) != self.channels:
            raise ValueError("one kernel length per channel required")
        if any(l < 1 for l in self.kernel_lengths):
            raise ValueError("kernel lengths must be >= 1")

    def added_params_per_site(self) -> int:
        return sum(self.kernel_lengths) + self.channels


class FilterBank(Module):
    """One site's kernels and mix weights, shared across embedding coordinates.

    Kernels are stored grouped by length (one [group_channels, length] tensor
    per distinct length, in first-appearance order); mix weights are a single
    [M] vector across all channels in that same order. Mix weights start at
    zero so a freshly inserted bank is an exact identity.
    """

    def __init__(self, config: FilterConfig, rng):
        self.config = config
        groups = []
        lengths = []
        for length in config.kernel_lengths:
            if length not in lengths:
                lengths.append(length)
                groups.append(0)
            groups[lengths.index(length)] += 1
        self.group_lengths = tuple(lengths)
        self.group_sizes = tuple(groups)
        self.kernels = [
            Tensor(rng.uniform(-1.0 / math.sqrt(k), 1.0 / math.sqrt(k), (g, k)),
                   requires_grad=True)
            for g, k in zip(self.group_sizes, self.group_lengths)
        ]
        self.mix_weights = Tensor(np.zeros(config.channels), requires_grad=True)

    def params(self) -> dict:
        out = {f"kernels.{i}": k for i, k in enumerate(self.kernels)}
        out["mix_weights"] = self.mix_weights
        return out

    def kernel_rows(self):
        """Yield (channel_index, kernel Tensor row view as numpy array)."""
        ch = 0
        for kern in self.kernels:
            for r in range(kern.shape[0]):
                yield ch, kern.data[r]
                ch += 1


def decompose(e: Tensor, bank: FilterBank) -> Tensor:
    """Time-frequency representation of one coordinate signal: [M, L].

    tf[k][t] = relu((h_k conv e)[t]) with causal zero padding on the left.
    """
    if e.ndim != 1:
        raise ValueError("decompose expects a 1-D coordinate signal")
    rows = []
    for kern in bank.kernels:
        for r in range(kern.shape[0]):
            rows.append(T.relu(T.causal_conv1d(e, T.narrow(kern, 0, r, 1).reshape(kern.shape[1]))))
    return T.stack(rows, axis=0)


def filter_fixed(e: Tensor, bank: FilterBank) -> Tensor:
    """f[t] = sum_k w_k * relu((h_k conv e))[t], the static mixing."""
    return T.channel_mix(decompose(e, bank), bank.mix_weights)


def filter_multiscale(e: Tensor, bank: FilterBank) -> Tensor:
    """Same contract as filter_fixed over a bank with grouped kernel lengths."""
    if len(bank.group_lengths) < 2:
        raise ValueError("multi-scale bank needs more than one kernel length")
    return T.channel_mix(decompose(e, bank), bank.mix_weights)


def apply_residual(e: Tensor, filtered: Tensor) -> Tensor:
    if e.shape != filtered.shape:
        raise ValueError("residual shapes must match")
    return e + filtered


class FilterSite(Module):
    """Vectorised whole-batch application of one bank: x[B,L,E] -> x + f."""

    def __init__(self, bank: FilterBank):
        self.bank = bank

    def decompose_batch(self, x: Tensor) -> Tensor:
        """[B, L, E] -> [B, L, E, M] channel stack (relu'd conv outputs)."""
        parts = [T.relu(T.causal_conv_bank(x, kern)) for kern in self.bank.kernels]
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)

    def __call__(self, x: Tensor) -> Tensor:
        nb, length, width = x.shape
        tf = self.decompose_batch(x)
        m = self.bank.config.channels
        f = (tf @ self.bank.mix_weights.reshape(m, 1)).reshape(nb, length, width)
        return x + f


def export_kernels_csv(banks, path) -> int:
    """Write every kernel tap as (site, channel, kernel_length, tap_index, value).

    `banks` is an iterable of FilterBank in site order. Returns rows written.
    """
    rows = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site", "channel", "kernel_length", "tap_index", "value"])
        for site, bank in enumerate(banks):
            for ch, kern in bank.kernel_rows():
                for j, val in enumerate(kern):
                    writer.writerow([site, ch, len(kern), j, repr(float(val))])
                    rows += 1
    return rows
