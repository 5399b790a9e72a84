"""Command line entry point: ``mrbcnn <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ContractError, DecodeError, ManifestError, NonFiniteError, ProtocolError

log = logging.getLogger("mrbcnn")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def cmd_train(args) -> int:
    from .config import load_config
    from .plotting import plot_training_log
    from .training import train

    cfg = load_config(args.config)
    res = train(cfg, resume=args.resume, allow_head_reinit=args.allow_head_reinit, threads=args.threads)
    if not args.no_plot and res.losses:
        start = res.iterations - len(res.losses) + 1
        plot_training_log(range(start, res.iterations + 1), res.losses, res.out_dir / "train_loss.png", res.val_history)
    best = "n/a" if res.best_recall1 is None else f"{res.best_recall1:.4f}"
    print(f"trained {res.iterations} iterations; best val recall@1 {best}; checkpoints in {res.out_dir}")
    return EXIT_OK


def _eval_trials(manifest, protocol: str, seed: int, n_trials: int):
    from .evaluation import SplitSpec, make_splits, single_shot_trials
    from .rng import Stream

    stream = Stream(seed).split("eval")
    if protocol == "market-single-query":
        splits = make_splits(manifest, SplitSpec(protocol), stream)
        return splits.test, splits.trials
    return manifest, single_shot_trials(manifest, n_trials, stream, cross_camera=protocol == "cuhk03-single-shot")


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import ImageSet, load_manifest
    from .evaluation import PROTOCOLS, evaluate_trials, write_metrics
    from .network import embed_numpy
    from .training import blas_threads

    if args.protocol not in PROTOCOLS:
        raise ContractError(f"unknown protocol {args.protocol!r}; expected one of {', '.join(PROTOCOLS)}")
    ckpt = load_checkpoint(args.checkpoint)
    net = ckpt.config.net
    manifest, trials = _eval_trials(load_manifest(args.manifest), args.protocol, args.seed, args.trials)
    images = ImageSet.load(manifest, net.input_h, net.input_w)
    with blas_threads(args.threads):
        emb = embed_numpy(images.images, ckpt.params, net)
    report = evaluate_trials(emb, manifest, trials, args.seed, args.protocol)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    paths = write_metrics(report, out, args.stem)
    if not args.no_plot:
        from .plotting import plot_recall_curves

        curve = report.mean_curve
        plot_recall_curves({net.variant: (np.arange(1, len(curve) + 1), curve)}, out / f"{args.stem}_recall.png")
    for key, val in report.summary().items():
        print(f"{key}: {val:.4f}" if isinstance(val, float) else f"{key}: {val}")
    print(f"metrics written to {paths['summary'].parent}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(args.seed)
    for line in report.lines():
        print(line)
    worst = report.worst()
    status = "PASS" if report.passed else "FAIL"
    print(f"{status}: {len(report.results)} checks, worst {worst.group}/{worst.name} {worst.max_rel_err:.3e}")
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_synth(args) -> int:
    from .data import synth_dataset
    from .rng import Stream

    m = synth_dataset(Stream(args.seed), args.ids, args.per_id, args.noise, Path(args.out), n_cameras=args.cameras)
    print(f"wrote {len(m)} images of {args.ids} identities to {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    from .data import load_manifest, write_manifest
    from .evaluation import SplitSpec, make_splits
    from .rng import Stream

    spec = SplitSpec(args.protocol, args.train, args.val, args.test)
    splits = make_splits(load_manifest(args.manifest), spec, Stream(args.seed).split("split"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        write_manifest(getattr(splits, name), out / f"{name}.csv")
        print(f"{name}: {len(getattr(splits, name).identities)} identities")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import default_suite, run_bench, write_bench_csv
    from .training import blas_threads

    with blas_threads(args.threads):
        cases = run_bench(default_suite(args.seed, args.channels), reps=args.reps, warmup=args.warmup)
    path = write_bench_csv(cases, args.out)
    for c in cases:
        if c.ok:
            print(f"{c.kernel:<15} {c.shape:<22} median {c.median_us:10.1f} us  p90 {c.p90_us:10.1f} us")
        else:
            print(f"{c.kernel:<15} {c.shape:<22} SKIPPED: {c.error}")
    print(f"report written to {path}")
    return EXIT_OK if all(c.ok for c in cases) else EXIT_FAIL


def cmd_ablate(args) -> int:
    from .experiments import quick_setup, run_ablation
    from .training import blas_threads

    setup = quick_setup(max_iters=args.iters, seed=args.seed)
    with blas_threads(args.threads):
        results = run_ablation(args.out, tuple(args.variants), setup, plot=not args.no_plot)
    for r in results:
        row = r.row()
        print(f"{r.variant:<8} untrained r@1 {row['untrained_recall1']:.3f}  trained r@1 {row['recall1']:.3f}"
              f"  mAP {row['mAP']:.3f}  ({row['seconds']:.0f}s)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrbcnn", description="Multi-region bilinear CNN person re-identification")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume")
    t.add_argument("--allow-head-reinit", action="store_true")
    t.add_argument("--threads", type=int, default=1)
    t.add_argument("--no-plot", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--protocol", default="cuhk03-single-shot")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--trials", type=int, default=5)
    e.add_argument("--out")
    e.add_argument("--stem", default="metrics")
    e.add_argument("--threads", type=int, default=1)
    e.add_argument("--no-plot", action="store_true")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of all layers, losses and the network")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic pedestrian dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--ids", type=int, required=True)
    s.add_argument("--per-id", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--cameras", type=int, default=2)
    s.set_defaults(func=cmd_synth)

    sp = sub.add_parser("split", help="identity-disjoint train/val/test manifests")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--protocol", default="cuhk03-single-shot")
    sp.add_argument("--train", type=int, default=1160)
    sp.add_argument("--val", type=int, default=100)
    sp.add_argument("--test", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_split)

    b = sub.add_parser("bench", help="time the conv, bilinear and pooling kernels")
    b.add_argument("--out", default="bench.csv")
    b.add_argument("--reps", type=int, default=20)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--channels", type=int, default=32)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--threads", type=int, default=1)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="desk-scale variant comparison on synthetic data")
    a.add_argument("--out", default="ablation")
    a.add_argument("--variants", nargs="+", default=["mr-bcnn", "cnn"])
    a.add_argument("--iters", type=int, default=300)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--threads", type=int, default=1)
    a.add_argument("--no-plot", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DecodeError, ContractError, ManifestError, ProtocolError, NonFiniteError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except RuntimeError as exc:  # TrainingAborted
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
