"""Flat key=value run configuration.

One `key=value` pair per line, `#` comments and blank lines allowed.
Unknown keys are rejected so typos fail loudly, and every training run
writes its resolved configuration next to its metrics log.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from splm.model import ModelConfig
from splm.training import TrainConfig


class ConfigError(ValueError):
    pass


def _parse_bool(val: str) -> bool:
    low = val.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {val!r}")


def _parse_ints(val: str) -> tuple:
    return tuple(int(x) for x in val.split(",") if x.strip())


@dataclass
class RunConfig:
    # paths
    corpus: str = ""
    checkpoint: str = "model.spck"
    metrics: str = "metrics.jsonl"
    resume: str = ""
    # model
    n_layers: int = 8
    d_model: int = 128
    d_ff: int = 512
    n_heads: int = 8
    context_len: int = 256
    vocab: int = 27
    head_hidden: int = 2048
    # filters
    variant: str = "none"
    filter_channels: int = 144
    filter_kernel_length: int = 7
    filter_kernel_lengths: tuple = (3, 7, 15, 31)
    filter_placement: tuple = ()
    adaptive_combine: bool = False
    mask_bottleneck: int = 32
    mask_heads: int = 4
    mask_d_ff: int = 128
    # training
    steps: int = 1000
    batch_size: int = 32
    lr: float = 3e-4
    warmup_steps: int = 100
    grad_clip: float = 1.0
    eval_interval: int = 250
    eval_batches: int = 8
    seed: int = 0
    precision: str = "f64"

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_layers=self.n_layers, d_model=self.d_model, d_ff=self.d_ff,
            n_heads=self.n_heads, context_len=self.context_len,
            vocab=self.vocab, head_hidden=self.head_hidden,
            filter_variant=self.variant,
            filter_channels=self.filter_channels,
            filter_kernel_length=self.filter_kernel_length,
            filter_kernel_lengths=tuple(self.filter_kernel_lengths),
            filter_placement=tuple(self.filter_placement),
            adaptive_combine=self.adaptive_combine,
            mask_bottleneck=self.mask_bottleneck,
            mask_heads=self.mask_heads, mask_d_ff=self.mask_d_ff)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps, batch_size=self.batch_size, lr=self.lr,
            warmup_steps=self.warmup_steps, grad_clip=self.grad_clip,
            eval_interval=self.eval_interval, eval_batches=self.eval_batches,
            seed=self.seed)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(x) for x in val)
            lines.append(f"{f.name}={val}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_text(text: str, overrides: dict = None) -> RunConfig:
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kwargs[key] = _convert(key, val)
    for key, val in (overrides or {}).items():
        if val is not None:
            kwargs[key] = val
    try:
        return RunConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _convert(key: str, val: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind in (int, "int"):
            return int(val)
        if kind in (float, "float"):
            return float(val)
        if kind in (bool, "bool"):
            return _parse_bool(val)
        if kind in (tuple, "tuple"):
            return _parse_ints(val)
        return val
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {val!r}") from None


def load(path, overrides: dict = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_text(text, overrides)
