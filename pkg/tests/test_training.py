import json
import math

import numpy as np
import pytest

from splm import corpus
from splm import model as M
from splm import tensor as T
from splm import training as TR
from splm.tensor import Tensor

TINY = dict(n_layers=1, d_model=16, d_ff=32, n_heads=2, context_len=8,
            vocab=27, head_hidden=24)


def tiny_setup(seed=0, text="ab" * 400, **cfg_kw):
    ids = corpus.encode(text)
    split = corpus.split_corpus(ids)
    model = M.GPT(M.ModelConfig(**TINY), seed=seed)
    cfg = TR.TrainConfig(batch_size=8, eval_interval=100, eval_batches=2,
                         seed=seed, **cfg_kw)
    return model, split, cfg


def test_adam_minimizes_quadratic():
    x = Tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = TR.Adam({"x": x}, lr=0.1, warmup_steps=0)
    for _ in range(300):
        x.grad = None
        loss = (x * x).sum()
        T.backward(loss)
        opt.step()
    assert np.abs(x.data).max() < 1e-3


def test_adam_warmup_schedule():
    x = Tensor(np.zeros(1), requires_grad=True)
    opt = TR.Adam({"x": x}, lr=3e-4, warmup_steps=100)
    assert math.isclose(opt.rate(), 3e-6)
    opt.t = 50
    assert math.isclose(opt.rate(), 3e-4 * 51 / 100)
    opt.t = 100
    assert math.isclose(opt.rate(), 3e-4)
    opt.t = 5000
    assert math.isclose(opt.rate(), 3e-4)


def test_clip_global_norm():
    a = Tensor(np.zeros(3), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    a.grad = np.array([3.0, 0.0, 0.0])
    b.grad = np.array([0.0, 4.0, 0.0, 0.0])
    norm = TR.clip_global_norm({"a": a, "b": b}, 1.0)
    assert math.isclose(norm, 5.0)
    joint = math.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum())
    assert math.isclose(joint, 1.0)
    # below the limit: untouched
    a.grad = np.array([0.1, 0.0, 0.0])
    b.grad = np.zeros(4)
    TR.clip_global_norm({"a": a, "b": b}, 1.0)
    assert a.grad[0] == 0.1


def test_zero_steps_leaves_model_unchanged():
    model, split, cfg = tiny_setup()
    before = {k: p.data.copy() for k, p in model.params().items()}
    run = TR.TrainRun(model, split, cfg)
    run.train(steps=0)
    for k, p in model.params().items():
        assert np.array_equal(before[k], p.data), k


def test_initial_eval_is_log_vocab():
    model, split, cfg = tiny_setup()
    nll = TR.evaluate(model, split.dev, batch_size=4)
    assert abs(nll - math.log(27)) < 1e-9
    assert abs(nll - 3.29584) < 5e-4


def test_evaluate_deterministic_and_validates():
    model, split, cfg = tiny_setup()
    a = TR.evaluate(model, split.test, batch_size=4)
    b = TR.evaluate(model, split.test, batch_size=4)
    assert a == b
    with pytest.raises(ValueError):
        TR.evaluate(model, split.test[:4], batch_size=4)


def test_memorizable_pattern_reaches_low_nll(tmp_path):
    model, split, cfg = tiny_setup(seed=1, lr=3e-3, warmup_steps=20)
    metrics = tmp_path / "m.jsonl"
    run = TR.TrainRun(model, split, cfg, metrics_path=metrics)
    final = run.train(steps=300)
    assert final.split == "dev"
    assert final.nll_nats < 0.1
    lines = [json.loads(l) for l in metrics.read_text().splitlines()]
    assert lines[0]["step"] == 0
    assert abs(lines[0]["nll_nats"] - math.log(27)) < 1e-9
    assert {"step", "split", "nll_nats", "tokens_seen", "wall_ms"} <= set(lines[0])
    assert lines[-1]["step"] == 300
    assert lines[-1]["tokens_seen"] == 300 * 8 * 8


def test_loss_decreases_over_training():
    model, split, cfg = tiny_setup(seed=2, lr=1e-3, warmup_steps=20)
    losses = []
    run = TR.TrainRun(model, split, cfg)
    run.train(steps=120, progress=lambda s, l: losses.append(l))
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_record(tmp_path):
    model, split, cfg = tiny_setup(seed=3)
    model.head.out.bias.data[:] = np.inf  # logits inf -> nll = inf - inf = nan
    metrics = tmp_path / "m.jsonl"
    run = TR.TrainRun(model, split, cfg, metrics_path=metrics)
    with pytest.raises(RuntimeError, match="non-finite"):
        run.train(steps=2)
    lines = [json.loads(l) for l in metrics.read_text().splitlines()]
    assert lines[-1]["split"] == "train"
    assert not np.isfinite(lines[-1]["nll_nats"])


def test_checkpoint_resume_is_bitwise(tmp_path):
    text = corpus.decode(np.random.default_rng(7).integers(0, 27, 600))

    losses_a = []
    model, split, cfg = tiny_setup(seed=4, text=text)
    TR.TrainRun(model, split, cfg).train(
        steps=4, progress=lambda s, l: losses_a.append(l))
    final_a = {k: p.data.copy() for k, p in model.params().items()}

    model_b, split_b, cfg_b = tiny_setup(seed=4, text=text)
    ck = tmp_path / "mid.spck"
    run_b = TR.TrainRun(model_b, split_b, cfg_b, checkpoint_path=ck)
    run_b.train(steps=2)

    model_c, extra, opt_arrays = M.load_checkpoint(ck)
    assert extra["step"] == "2"
    run_c = TR.TrainRun(model_c, split_b, cfg_b)
    run_c.resume(extra, opt_arrays)
    losses_c = []
    run_c.train(steps=2, progress=lambda s, l: losses_c.append(l))

    assert losses_c == losses_a[2:]
    for k, p in model_c.params().items():
        assert np.array_equal(p.data, final_a[k]), k


def test_speedup_definition():
    base = [(0, 3.3), (250, 2.0), (500, 1.5), (1000, 1.0)]
    assert TR.speedup(base, base, 1.5) == 0.0
    variant = [(0, 3.3), (280, 1.4), (560, 1.0)]
    baseline = [(0, 3.3), (1000, 1.0)]
    # crossings: variant first reaches 1.4 at step 280; target 1.0 -> 560 vs 1000
    assert math.isclose(TR.speedup(baseline, variant, 1.0), 44.0)
    with pytest.raises(TR.NotComparable):
        TR.speedup(base, variant, 0.5)
    with pytest.raises(TR.NotComparable):
        TR.speedup([(0, 3.0), (10, 2.0)], [(0, 3.0)], 2.5)


def test_first_crossing_interpolates():
    log = [(0, 4.0), (100, 2.0)]
    assert math.isclose(TR.first_crossing(log, 3.0), 50.0)
    assert TR.first_crossing([(0, 1.0), (10, 0.5)], 2.0) == 0.0
    recs = [TR.MetricRecord(0, "dev", 4.0, 0, 0),
            TR.MetricRecord(100, "dev", 2.0, 0, 0)]
    assert math.isclose(TR.first_crossing(recs, 2.0), 100.0)


def test_param_count_reexported():
    model, _, _ = tiny_setup()
    assert TR.param_count(model) == M.param_count(model)
