"""Decoder-only character LM with optional per-layer signal filters.

Baseline: token + learned positional embeddings, pre-norm causal blocks,
final layer norm, and a two-layer MLP head whose output layer starts at
zero so a fresh model predicts the uniform distribution (initial loss is
exactly ln(vocab)).

Filter variants insert one shared FilterBank (optionally with a mask
decoder) after each configured block; with their mix weights at zero they
are exact identities, so a fresh filtered model reproduces the baseline
forward bit for bit given identical remaining parameters.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from splm import tensor as T
from splm.adaptive import AdaptiveFilterSite, MaskDecoder, MaskDecoderConfig
from splm.filters import (MULTI_SCALE_LENGTHS, SINGLE_SCALE_LENGTH,
                          FilterBank, FilterConfig, FilterSite)
from splm.nn import LayerNorm, Linear, Module, TransformerBlock
from splm.tensor import Tensor

VARIANTS = ("none", "single_scale", "multi_scale", "token_adaptive")


@dataclass
class ModelConfig:
    n_layers: int = 8
    d_model: int = 128
    d_ff: int = 512
    n_heads: int = 8
    context_len: int = 256
    vocab: int = 27
    head_hidden: int = 2048
    filter_variant: str = "none"
    filter_channels: int = 144
    filter_kernel_length: int = SINGLE_SCALE_LENGTH
    filter_kernel_lengths: tuple = MULTI_SCALE_LENGTHS
    filter_placement: tuple = ()  # empty = after every block
    adaptive_combine: bool = False
    mask_bottleneck: int = 32
    mask_heads: int = 4
    mask_d_ff: int = 128

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.filter_variant not in VARIANTS:
            raise ValueError(f"unknown filter variant {self.filter_variant!r}")

    def placement(self) -> tuple:
        sites = self.filter_placement or tuple(range(self.n_layers))
        if any(i < 0 or i >= self.n_layers for i in sites):
            raise ValueError("filter placement index out of range")
        return tuple(sites)

    def filter_config(self) -> FilterConfig:
        if self.filter_variant == "multi_scale":
            return FilterConfig.multi_scale(self.filter_channels,
                                            self.filter_kernel_lengths,
                                            self.placement())
        return FilterConfig.single_scale(self.filter_channels,
                                         self.filter_kernel_length,
                                         self.placement())


class MLPHead(Module):
    def __init__(self, d_model: int, hidden: int, vocab: int, rng):
        self.up = Linear(d_model, hidden, rng)
        self.out = Linear(hidden, vocab, rng, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(self.up(x).relu())


class GPT(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11D]))
        self.config = config
        c = config
        self.tok_emb = Tensor(rng.normal(0, 0.02, (c.vocab, c.d_model)),
                              requires_grad=True)
        self.pos_emb = Tensor(rng.normal(0, 0.02, (c.context_len, c.d_model)),
                              requires_grad=True)
        self.blocks = [TransformerBlock(c.d_model, c.n_heads, c.d_ff, rng)
                       for _ in range(c.n_layers)]
        # Filter parameters come from a separate stream so that models with
        # and without filters share the surrounding weights at a given seed.
        self.sites = self._build_sites(
            np.random.default_rng(np.random.SeedSequence([seed, 0xF117])))
        self.final_ln = LayerNorm(c.d_model)
        self.head = MLPHead(c.d_model, c.head_hidden, c.vocab, rng)

    def _build_sites(self, rng):
        c = self.config
        if c.filter_variant == "none":
            return []
        fc = c.filter_config()
        sites = []
        for _ in c.placement():
            bank = FilterBank(fc, rng)
            if c.filter_variant == "token_adaptive":
                mc = MaskDecoderConfig(c.filter_channels, c.mask_bottleneck,
                                       c.mask_heads, c.mask_d_ff, c.context_len)
                sites.append(AdaptiveFilterSite(bank, MaskDecoder(mc, rng),
                                                c.adaptive_combine))
            else:
                sites.append(FilterSite(bank))
        return sites

    def site_after(self, layer: int):
        if self.config.filter_variant == "none":
            return None
        try:
            return self.sites[self.config.placement().index(layer)]
        except ValueError:
            return None

    def __call__(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError("tokens must be [batch, length]")
        nb, length = tokens.shape
        c = self.config
        if length > c.context_len:
            raise ValueError(f"sequence length {length} exceeds context "
                             f"{c.context_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= c.vocab):
            raise ValueError("token id out of range")
        x = T.embedding(self.tok_emb, tokens) + T.narrow(self.pos_emb, 0, 0, length)
        for i, block in enumerate(self.blocks):
            x = block(x)
            site = self.site_after(i)
            if site is not None:
                x = site(x)
        return self.head(self.final_ln(x))

    def filter_banks(self):
        return [s.bank for s in self.sites]


def param_count(module: Module) -> int:
    return sum(p.data.size for p in module.params().values())


def baseline_param_count(c: ModelConfig) -> int:
    """Hand-summed closed form, kept independent of the Module walk."""
    emb = c.vocab * c.d_model + c.context_len * c.d_model
    attn = 4 * (c.d_model * c.d_model + c.d_model)
    mlp = c.d_model * c.d_ff + c.d_ff + c.d_ff * c.d_model + c.d_model
    norms = 2 * (2 * c.d_model)
    block = attn + mlp + norms
    head = c.d_model * c.head_hidden + c.head_hidden \
        + c.head_hidden * c.vocab + c.vocab
    return emb + c.n_layers * block + 2 * c.d_model + head


# ---------------------------------------------------------------------------
# checkpoint format: "SPCK", version, config text block, payload digest,
# then named parameter records (all floats stored as little-endian f64).

_MAGIC = b"SPCK"
_VERSION = 1

_TUPLE_KEYS = {"filter_kernel_lengths", "filter_placement"}
_BOOL_KEYS = {"adaptive_combine"}


def config_to_text(config: ModelConfig, extra: dict = None) -> str:
    pairs = []
    for k, v in vars(config).items():
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        pairs.append(f"{k}={v}")
    for k, v in (extra or {}).items():
        pairs.append(f"{k}={v}")
    return "\n".join(pairs) + "\n"


def config_from_text(text: str):
    """Parse the checkpoint config block back into (ModelConfig, extras)."""
    known = {f.name for f in ModelConfig.__dataclass_fields__.values()}
    kwargs, extra = {}, {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in known:
            extra[key] = val
            continue
        if key in _TUPLE_KEYS:
            kwargs[key] = tuple(int(x) for x in val.split(",") if x)
        elif key in _BOOL_KEYS:
            kwargs[key] = val == "True"
        elif key == "filter_variant":
            kwargs[key] = val
        else:
            kwargs[key] = int(val)
    return ModelConfig(**kwargs), extra


def _encode_records(arrays: dict) -> bytes:
    chunks = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(data.tobytes())
    return b"".join(chunks)


def save_checkpoint(path, model: GPT, extra_arrays: dict = None,
                    extra_config: dict = None) -> None:
    arrays = {k: v.data for k, v in model.params().items()}
    arrays.update(extra_arrays or {})
    payload = _encode_records(arrays)
    cfg = config_to_text(model.config, extra_config).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(bytes([_VERSION]))
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(hashlib.sha256(payload).digest())
        fh.write(payload)


def read_checkpoint(path):
    """Returns (ModelConfig, extra config dict, name -> f64 array dict)."""
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    if blob[4] != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob[4]}")
    (cfg_len,) = struct.unpack_from("<I", blob, 5)
    off = 9
    config, extra = config_from_text(blob[off:off + cfg_len].decode())
    off += cfg_len
    digest = blob[off:off + 32]
    off += 32
    payload = blob[off:]
    if hashlib.sha256(payload).digest() != digest:
        raise ValueError(f"{path}: checkpoint payload checksum mismatch")
    arrays = {}
    pos = 0
    while pos < len(payload):
        (nlen,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        name = payload[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", payload, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=count,
                                     offset=pos).reshape(shape).copy()
        pos += 8 * count
    return config, extra, arrays


def load_checkpoint(path):
    """Rebuild a model (and return optimizer extras) from a checkpoint."""
    config, extra, arrays = read_checkpoint(path)
    model = GPT(config, seed=int(extra.get("seed", "0")))
    model_arrays = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    opt_arrays = {k: v for k, v in arrays.items() if k.startswith("opt.")}
    model.load_params(model_arrays)
    return model, extra, opt_arrays
