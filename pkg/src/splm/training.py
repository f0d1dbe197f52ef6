"""Next-token training loop: Adam, evaluation, metrics, speedup measurement.

Batches are a pure function of (seed, step), so a run resumed from a
checkpoint sees exactly the token windows the uninterrupted run would have,
and 64-bit single-threaded runs are bit-reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from splm import corpus
from splm import tensor as T
from splm.model import GPT, param_count, save_checkpoint


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 3e-4
    warmup_steps: int = 100
    grad_clip: float = 1.0
    eval_interval: int = 250
    eval_batches: int = 8  # dev batches per periodic eval; 0 = whole split
    seed: int = 0


@dataclass
class MetricRecord:
    step: int
    split: str
    nll_nats: float
    tokens_seen: int
    wall_ms: int


class NotComparable(Exception):
    """Raised when a speedup target is never reached by one of the logs."""


class Adam:
    def __init__(self, params: dict, lr: float = 3e-4, warmup_steps: int = 100,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def rate(self) -> float:
        if self.warmup_steps > 0 and self.t < self.warmup_steps:
            return self.lr * (self.t + 1) / self.warmup_steps
        return self.lr

    def step(self) -> None:
        lr = self.rate()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k] = b1 * self.m[k] + (1 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1 - b2) * (g * g)
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)

    def export_state(self) -> dict:
        out = {}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state(self, arrays: dict, t: int) -> None:
        self.t = t
        for k in self.params:
            mk, vk = f"opt.m.{k}", f"opt.v.{k}"
            if mk not in arrays or vk not in arrays:
                raise ValueError(f"optimizer state missing for {k!r}")
            self.m[k] = np.asarray(arrays[mk], dtype=self.m[k].dtype).reshape(self.m[k].shape).copy()
            self.v[k] = np.asarray(arrays[vk], dtype=self.v[k].dtype).reshape(self.v[k].shape).copy()


def clip_global_norm(params: dict, max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = total ** 0.5
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def evaluate(model: GPT, ids: np.ndarray, batch_size: int = 8,
             max_batches: int = 0) -> float:
    """Mean per-token NLL in nats over sequential non-overlapping windows."""
    if len(ids) <= model.config.context_len:
        raise ValueError("split too small to evaluate")
    total_nll = 0.0
    total_tokens = 0
    with T.no_grad():
        stream = corpus.batch_iter(ids, model.config.context_len, batch_size,
                                   seed=0, sequential=True)
        for i, (x, y) in enumerate(stream):
            if max_batches and i >= max_batches:
                break
            loss = T.cross_entropy(model(x), y)
            n = x.size
            total_nll += loss.item() * n
            total_tokens += n
    return total_nll / total_tokens


class TrainRun:
    def __init__(self, model: GPT, split: corpus.CorpusSplit, config: TrainConfig,
                 metrics_path=None, checkpoint_path=None):
        self.model = model
        self.split = split
        self.config = config
        self.metrics_path = metrics_path
        self.checkpoint_path = checkpoint_path
        self.step = 0
        self.opt = Adam(model.params(), lr=config.lr,
                        warmup_steps=config.warmup_steps)
        self.records = []
        self._t0 = time.monotonic()

    def resume(self, extra: dict, opt_arrays: dict) -> None:
        self.step = int(extra.get("step", "0"))
        self.opt.load_state(opt_arrays, self.step)

    def _record(self, split_name: str, nll: float) -> MetricRecord:
        rec = MetricRecord(
            step=self.step, split=split_name, nll_nats=float(nll),
            tokens_seen=self.step * self.config.batch_size
            * self.model.config.context_len,
            wall_ms=int((time.monotonic() - self._t0) * 1000))
        self.records.append(rec)
        if self.metrics_path:
            with open(self.metrics_path, "a") as fh:
                fh.write(json.dumps(asdict(rec)) + "\n")
        return rec

    def _eval_dev(self) -> MetricRecord:
        nll = evaluate(self.model, self.split.dev,
                       batch_size=self.config.batch_size,
                       max_batches=self.config.eval_batches)
        return self._record("dev", nll)

    def train(self, steps: int = None, progress=None) -> MetricRecord:
        """Run `steps` optimizer updates (default: config.steps); returns the
        final dev metric. Evaluates every eval_interval steps, including once
        at entry, and checkpoints (if a path is set) after each eval."""
        cfg = self.config
        todo = cfg.steps if steps is None else steps
        model = self.model
        params = model.params()
        last = self._eval_dev()
        for _ in range(todo):
            x, y = corpus.batch_at(self.split.train, model.config.context_len,
                                   cfg.batch_size, cfg.seed, self.step)
            model.zero_grads()
            loss = T.cross_entropy(model(x), y)
            if not np.isfinite(loss.item()):
                self._record("train", loss.item())
                raise RuntimeError(f"non-finite training loss at step {self.step}")
            T.backward(loss)
            clip_global_norm(params, cfg.grad_clip)
            self.opt.step()
            self.step += 1
            if progress:
                progress(self.step, loss.item())
            if self.step % cfg.eval_interval == 0:
                last = self._eval_dev()
                self.checkpoint()
        if self.step % cfg.eval_interval != 0:
            last = self._eval_dev()
            self.checkpoint()
        return last

    def checkpoint(self, path=None) -> None:
        path = path or self.checkpoint_path
        if not path:
            return
        save_checkpoint(path, self.model, extra_arrays=self.opt.export_state(),
                        extra_config={"step": self.step, "seed": self.config.seed})


def first_crossing(log, target_nll: float) -> float:
    """First step at which the log reaches target_nll, linearly interpolated
    between eval points. `log` holds (step, nll) pairs or MetricRecords."""
    prev = None
    for item in log:
        s, v = (item.step, item.nll_nats) if isinstance(item, MetricRecord) else item
        if v <= target_nll:
            if prev is None:
                return float(s)
            ps, pv = prev
            return ps + (s - ps) * (pv - target_nll) / (pv - v)
        prev = (float(s), float(v))
    raise NotComparable(f"log never reaches NLL {target_nll}")


def speedup(baseline_log, variant_log, target_nll: float) -> float:
    """Percent fewer steps for the variant to first reach target_nll."""
    sb = first_crossing(baseline_log, target_nll)
    sv = first_crossing(variant_log, target_nll)
    if sb == 0:
        raise NotComparable("baseline starts at or below the target")
    return 100.0 * (sb - sv) / sb


__all__ = ["Adam", "MetricRecord", "NotComparable", "TrainConfig", "TrainRun",
           "clip_global_norm", "evaluate", "first_crossing", "param_count",
           "speedup"]
