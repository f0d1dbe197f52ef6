"""Command-line entry point.

Subcommands: prepare, train, eval, export-kernels, gradcheck, synth-classify.
All randomness flows from --seed (or the config seed); f64 runs are
deterministic. SPLM_DATA_DIR is consulted as a fallback root for data paths.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from splm import config as C
from splm import corpus
from splm import dct as D
from splm import filters as F
from splm import tensor as T
from splm import training as TR
from splm.adaptive import MaskDecoder, MaskDecoderConfig, filter_adaptive
from splm.model import GPT, load_checkpoint
from splm.tensor import Tensor


def resolve_data_path(p) -> Path:
    path = Path(p)
    if path.exists():
        return path
    root = os.environ.get("SPLM_DATA_DIR")
    if root and not path.is_absolute():
        candidate = Path(root) / path
        if candidate.exists():
            return candidate
    return path


def _overrides(args) -> dict:
    return {k: getattr(args, k, None)
            for k in ("seed", "precision", "steps", "variant")}


def _load_config(args) -> C.RunConfig:
    if getattr(args, "config", None):
        return C.load(args.config, _overrides(args))
    return C.parse_text("", _overrides(args))


def cmd_prepare(args) -> int:
    src = resolve_data_path(args.input)
    if not src.exists():
        print(f"error: corpus file not found: {args.input}", file=sys.stderr)
        return 1
    split = corpus.prepare(src, args.output)
    print(f"wrote {args.output}: train={len(split.train)} dev={len(split.dev)} "
          f"test={len(split.test)} checksum={split.checksum}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    T.set_default_dtype(cfg.precision)
    if not cfg.corpus:
        print("error: config must set corpus=<path to .splm split>", file=sys.stderr)
        return 1
    split_path = resolve_data_path(cfg.corpus)
    if not split_path.exists():
        print(f"error: corpus split not found: {cfg.corpus}", file=sys.stderr)
        return 1
    split = corpus.load_split(split_path)

    extra = opt_arrays = None
    if cfg.resume:
        if not Path(cfg.resume).exists():
            print(f"error: resume checkpoint not found: {cfg.resume}",
                  file=sys.stderr)
            return 1
        model, extra, opt_arrays = load_checkpoint(cfg.resume)
    else:
        model = GPT(cfg.model_config(), seed=cfg.seed)

    run = TR.TrainRun(model, split, cfg.train_config(),
                      metrics_path=cfg.metrics, checkpoint_path=cfg.checkpoint)
    if extra is not None:
        run.resume(extra, opt_arrays)

    resolved = Path(str(cfg.metrics) + ".config")
    resolved.write_text(cfg.to_text())

    print(f"training variant={cfg.variant} params={TR.param_count(model)} "
          f"steps={cfg.steps} seed={cfg.seed} precision={cfg.precision}")
    final = run.train(progress=_progress_printer(cfg))
    print(f"final step={final.step} dev nll_nats={final.nll_nats:.12f}")
    print(f"checkpoint written to {cfg.checkpoint}")
    return 0


def _progress_printer(cfg):
    def cb(step, loss):
        if step % max(1, cfg.eval_interval // 5) == 0:
            print(f"  step {step} train nll {loss:.4f}")
    return cb


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    T.set_default_dtype(cfg.precision)
    if not Path(args.checkpoint).exists():
        print(f"error: checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return 1
    model, _, _ = load_checkpoint(args.checkpoint)
    corpus_path = args.corpus or cfg.corpus
    if not corpus_path:
        print("error: no corpus given (use --corpus or a config with corpus=)",
              file=sys.stderr)
        return 1
    split_path = resolve_data_path(corpus_path)
    if not split_path.exists():
        print(f"error: corpus split not found: {corpus_path}", file=sys.stderr)
        return 1
    split = corpus.load_split(split_path)
    ids = getattr(split, args.split)
    # with a config, mirror the training-time eval exactly (same windows)
    max_batches = cfg.eval_batches if args.config else 0
    nll = TR.evaluate(model, ids, batch_size=cfg.batch_size,
                      max_batches=max_batches)
    print(f"{args.split} nll_nats={nll:.12f}")
    return 0


def cmd_export_kernels(args) -> int:
    if not Path(args.checkpoint).exists():
        print(f"error: checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return 1
    model, _, _ = load_checkpoint(args.checkpoint)
    banks = model.filter_banks()
    if not banks:
        print("error: checkpoint has no filter banks (variant=none); "
              "nothing to export", file=sys.stderr)
        return 1
    rows = F.export_kernels_csv(banks, args.output)
    print(f"wrote {rows} kernel taps for {len(banks)} sites to {args.output}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck suite

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4


def _gradcheck_cases(seed: int):
    """Yields (name, tolerance, function, input tensor)."""
    rng = np.random.default_rng(seed)

    def rt(*shape, off=0.0):
        return Tensor(rng.standard_normal(shape) + off)

    probe9 = Tensor(rng.standard_normal(9))
    mat34 = Tensor(rng.standard_normal((3, 4)))
    kern = Tensor(rng.standard_normal(4))
    sig = Tensor(rng.standard_normal(11) + 0.2)
    bank_k = Tensor(rng.standard_normal((3, 4)))
    mixw = Tensor(rng.standard_normal(3))
    tokw = Tensor(rng.standard_normal((7, 3)))
    targets = rng.integers(0, 5, (2, 3))
    hub_t = rng.standard_normal(8)
    dct_probe = Tensor(rng.standard_normal(9))

    cases = [
        ("add", PRIMITIVE_TOL, lambda x: (x + probe9).sum(), rt(9)),
        ("mul", PRIMITIVE_TOL, lambda x: (x * probe9).sum(), rt(9)),
        ("matmul", PRIMITIVE_TOL, lambda x: (x @ mat34).sum(), rt(5, 3)),
        ("relu", PRIMITIVE_TOL, lambda x: (x.relu() * probe9).sum(), rt(9, off=0.05)),
        ("softmax", PRIMITIVE_TOL,
         lambda x: (T.softmax(x) * probe9).sum(), rt(9)),
        ("layer_norm", PRIMITIVE_TOL,
         lambda x: (T.layer_norm(x, Tensor(np.ones(9)), Tensor(np.zeros(9)))
                    * probe9).sum(), rt(2, 9)),
        ("embedding", PRIMITIVE_TOL,
         lambda x: (T.embedding(x, np.array([0, 2, 1]))
                    * Tensor(np.linspace(0.5, 1.4, 9).reshape(3, 3))).sum(),
         rt(3, 3)),
        ("causal_conv_signal", PRIMITIVE_TOL,
         lambda x: (T.causal_conv1d(x, kern) * Tensor(np.linspace(0.5, 1.5, 11))).sum(),
         rt(11)),
        ("causal_conv_kernel", PRIMITIVE_TOL,
         lambda x: (T.causal_conv1d(sig, x) * Tensor(np.linspace(0.5, 1.5, 11))).sum(),
         rt(4)),
        ("conv_bank", PRIMITIVE_TOL,
         lambda x: T.causal_conv_bank(x, bank_k).sum(), rt(2, 6, 3)),
        ("channel_mix", PRIMITIVE_TOL,
         lambda x: T.channel_mix(x, mixw).sum(), rt(3, 7)),
        ("token_mix", PRIMITIVE_TOL,
         lambda x: T.token_mix(x, tokw).sum(), rt(3, 7)),
        ("dct2", PRIMITIVE_TOL, lambda x: (D.dct2(x) * dct_probe).sum(), rt(9)),
        ("idct2", PRIMITIVE_TOL, lambda x: (D.idct2(x) * dct_probe).sum(), rt(9)),
        ("cross_entropy", PRIMITIVE_TOL,
         lambda x: T.cross_entropy(x, targets), rt(2, 3, 5)),
        ("huber", PRIMITIVE_TOL, lambda x: T.huber(x, hub_t), rt(8)),
    ]

    single = F.FilterConfig.single_scale(channels=3, length=4)
    bank1 = F.FilterBank(single, np.random.default_rng(seed + 1))
    bank1.mix_weights.data = rng.standard_normal(3)
    multi = F.FilterConfig.multi_scale(channels=4, lengths=(3, 7))
    bank2 = F.FilterBank(multi, np.random.default_rng(seed + 2))
    bank2.mix_weights.data = rng.standard_normal(4)
    dec = MaskDecoder(MaskDecoderConfig(3, 8, 2, 16, 32),
                      np.random.default_rng(seed + 3))
    dec.out_proj.weight.data = 0.2 * rng.standard_normal((8, 3))
    dec.out_proj.bias.data = 0.2 * rng.standard_normal(3)
    rw = Tensor(rng.standard_normal(9))

    cases += [
        ("filter_fixed_residual", COMPOSITE_TOL,
         lambda x: (F.apply_residual(x, F.filter_fixed(x, bank1)) * probe9).sum(),
         rt(9, off=0.05)),
        ("filter_multiscale_residual", COMPOSITE_TOL,
         lambda x: (F.apply_residual(x, F.filter_multiscale(x, bank2)) * probe9).sum(),
         rt(9, off=0.05)),
        ("filter_adaptive_residual", COMPOSITE_TOL,
         lambda x: (F.apply_residual(x, filter_adaptive(x, bank1, dec)) * probe9).sum(),
         rt(9, off=0.05)),
        ("spectral_reweight_signal", COMPOSITE_TOL,
         lambda x: (D.spectral_reweight(x, rw) * probe9).sum(), rt(9)),
        ("spectral_reweight_weights", COMPOSITE_TOL,
         lambda x: (D.spectral_reweight(probe9, x) * dct_probe).sum(), rt(9)),
    ]
    return cases


def run_gradcheck(seed: int = 0, out=None):
    results = []
    for name, tol, fn, x in _gradcheck_cases(seed):
        err = T.grad_check(fn, x)
        results.append((name, tol, err, err < tol))
    width = max(len(n) for n, *_ in results)
    for name, tol, err, ok in results:
        print(f"  {name:<{width}}  rel_err={err:.3e}  tol={tol:.0e}  "
              f"{'PASS' if ok else 'FAIL'}", file=out or sys.stdout)
    return results


def cmd_gradcheck(args) -> int:
    print(f"gradient checks (seed={args.seed or 0})")
    results = run_gradcheck(args.seed or 0)
    bad = [n for n, _, _, ok in results if not ok]
    print(f"{len(results) - len(bad)}/{len(results)} checks passed")
    return 1 if bad else 0


def cmd_synth_classify(args) -> int:
    seed = args.seed or 0
    steps = args.steps or 800
    cfg = D.ClassifierConfig(n_tokens=args.length, in_dim=args.dim,
                             classes=args.classes)
    chance = 1.0 / args.classes
    rows = []
    for s in range(args.seeds):
        run_seed = seed + s
        data, labels = D.synth_dataset(
            args.train_n + args.test_n, length=args.length, dim=args.dim,
            classes=args.classes, noise=args.noise, seed=run_seed)
        tr_x, te_x = data[:args.train_n], data[args.train_n:]
        tr_y, te_y = labels[:args.train_n], labels[args.train_n:]
        accs = {}
        for mode in ("trainable", "frozen"):
            clf = D.SequenceClassifier(cfg, seed=run_seed)
            if mode == "frozen":
                clf.freeze_dct()
            D.fit_classifier(clf, tr_x, tr_y, steps=steps, lr=args.lr,
                             seed=run_seed)
            accs[mode] = D.accuracy(clf, te_x, te_y)
        rows.append(accs)
        print(f"  seed {run_seed}: trainable={accs['trainable']:.3f} "
              f"frozen={accs['frozen']:.3f}")
    mean_t = float(np.mean([r["trainable"] for r in rows]))
    mean_f = float(np.mean([r["frozen"] for r in rows]))
    ok = mean_t >= mean_f
    print(f"mean over {args.seeds} seeds: trainable={mean_t:.3f} "
          f"frozen={mean_f:.3f} chance={chance:.3f}")
    print("PASS: trainable >= frozen" if ok else "FAIL: trainable < frozen")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splm",
        description="Character-level LM training with learnable causal "
                    "filterbanks over token-axis activation signals.")
    sub = parser.add_subparsers(dest="command", required=True)

    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key=value run configuration file")
    shared.add_argument("--seed", type=int, help="override the run seed")
    shared.add_argument("--precision", choices=("f32", "f64"),
                        help="float width (f64 is deterministic)")
    shared.add_argument("--steps", type=int, help="override training steps")
    shared.add_argument("--variant",
                        choices=("none", "single_scale", "multi_scale",
                                 "token_adaptive"),
                        help="override the filter variant")

    p = sub.add_parser("prepare", parents=[shared],
                       help="normalize + tokenize a text corpus and write "
                            "the train/dev/test split file")
    p.add_argument("input", help="raw text file (SPLM_DATA_DIR fallback)")
    p.add_argument("output", help="output .splm split file")
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("train", parents=[shared],
                       help="train a model per the config file")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[shared],
                       help="report mean NLL (nats/token) of a checkpoint "
                            "on a corpus split")
    p.add_argument("checkpoint")
    p.add_argument("split", choices=("train", "dev", "test"))
    p.add_argument("--corpus", help=".splm split file (else config corpus)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export-kernels", parents=[shared],
                       help="dump filter kernel taps to CSV")
    p.add_argument("checkpoint")
    p.add_argument("output", help="output CSV path")
    p.set_defaults(fn=cmd_export_kernels)

    p = sub.add_parser("gradcheck", parents=[shared],
                       help="finite-difference checks of every primitive "
                            "and composite filter block")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("synth-classify", parents=[shared],
                       help="planted-frequency classification: trainable vs "
                            "frozen spectral weights")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--length", type=int, default=40)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--train-n", type=int, default=1536)
    p.add_argument("--test-n", type=int, default=512)
    p.set_defaults(fn=cmd_synth_classify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "precision", None):
        T.set_default_dtype(args.precision)
    try:
        return args.fn(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
