"""``ilgnet`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Reports go to stdout as ``key=value`` lines (CSV for ``classify``);
diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from ilgnet import ava, engine, gradcheck, imageio, synth
from ilgnet.graph import ArchVariant, TapUnavailable, Variant, assemble, classify, tap_features
from ilgnet.trainer import (
    CheckpointError,
    NumericError,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# Forward-pass seconds per image reported for a GTX 980 Ti; hardware-bound,
# printed for comparison only.
REFERENCE_TEST_TIME = {Variant.ILGNET: 0.31, Variant.THIRD_GOOGLENET: 0.33}


class DataError(Exception):
    pass


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _emit(**kv):
    for k, v in kv.items():
        print(f"{k}={v}")


def _variant(name: str) -> Variant:
    try:
        return Variant.parse(name)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_images(examples, images_dir: Path):
    out = []
    for e in examples:
        path = images_dir / f"{e.image_id}.ppm"
        if not path.is_file():
            raise DataError(f"missing image {path}")
        try:
            out.append(imageio.read_ppm(path))
        except imageio.ImageFormatError as exc:
            raise DataError(f"{path}: {exc}") from None
    return out


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except CheckpointError as exc:
        raise DataError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    try:
        records, _, _ = synth.synth_dataset(args.n, args.seed, args.rule, args.out, (args.height, args.width))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _emit(images=len(records), metadata=Path(args.out) / "metadata.csv")
    return EXIT_OK


def cmd_split(args):
    try:
        records = ava.read_metadata(args.metadata)
    except FileNotFoundError:
        raise DataError(f"metadata not found: {args.metadata}") from None
    except ava.MetadataError as exc:
        raise DataError(str(exc)) from None
    try:
        if args.protocol == "ava1":
            train_set, test_set = ava.ava1_split(records, args.delta, args.seed, args.test_count)
        else:
            train_set, test_set = ava.ava2_split(records, args.seed)
    except ava.SplitError as exc:
        raise DataError(str(exc)) from None
    ava.write_split(train_set + test_set, args.out)
    _emit(**ava.split_counts(train_set + test_set))
    return EXIT_OK


def _partition(split_path, partition):
    try:
        examples = [e for e in ava.read_split(split_path) if e.partition == partition]
    except FileNotFoundError:
        raise DataError(f"split not found: {split_path}") from None
    except ava.MetadataError as exc:
        raise DataError(str(exc)) from None
    if not examples:
        raise DataError(f"partition {partition!r} of {split_path} is empty")
    return examples


def cmd_train(args):
    overrides = {}
    if args.variant:
        overrides["variant"] = _variant(args.variant).value
    try:
        text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
        config = TrainConfig.from_text(text, **overrides)
    except FileNotFoundError:
        raise DataError(f"config not found: {args.config}") from None
    except (ValueError, KeyError) as exc:
        raise UsageError(f"bad config: {exc}") from None
    examples = _partition(args.split, args.partition)
    raw = _load_images(examples, Path(args.images))
    means = imageio.compute_channel_means(raw)
    side = config.input_side
    x = np.concatenate([imageio.preprocess(img, side, means) for img in raw])
    labels = [e.label for e in examples]
    net = assemble(config.arch, seed=config.seed)
    net.channel_means = means
    ckpt, metrics = train(net, x, labels, config)
    save_checkpoint(net, args.out, ckpt.iteration, config)
    metrics_path = args.metrics or f"{args.out}.metrics.csv"
    metrics.write(metrics_path)
    epochs = metrics.epoch_losses()
    _emit(
        variant=config.arch.variant.value,
        iterations=ckpt.iteration,
        examples=len(examples),
        first_epoch_loss=f"{epochs[0]:.6f}",
        final_epoch_loss=f"{epochs[-1]:.6f}",
        checkpoint=args.out,
        metrics=metrics_path,
    )
    return EXIT_OK


def cmd_eval(args):
    ckpt = _load_ckpt(args.ckpt)
    net = ckpt.net
    if args.variant and _variant(args.variant) is not net.arch.variant:
        raise DataError(f"checkpoint holds {net.arch.variant.value}, not {_variant(args.variant).value}")
    examples = _partition(args.split, args.partition)
    raw = _load_images(examples, Path(args.images))
    x = np.concatenate([imageio.preprocess(img, net.arch.input_side, net.channel_means) for img in raw])
    acc, m = evaluate(net, x, [e.label for e in examples])
    _emit(
        variant=net.arch.variant.value,
        partition=args.partition,
        n=int(m.sum()),
        accuracy=f"{acc:.6f}",
        true_bad_pred_bad=int(m[0, 0]),
        true_bad_pred_good=int(m[0, 1]),
        true_good_pred_bad=int(m[1, 0]),
        true_good_pred_good=int(m[1, 1]),
    )
    return EXIT_OK


def cmd_classify(args):
    net = _load_ckpt(args.ckpt).net
    status = EXIT_OK
    for path in args.images:
        try:
            img = imageio.read_ppm(path)
        except (OSError, imageio.ImageFormatError) as exc:
            print(f"{path}: {exc}", file=sys.stderr)
            print(f"{path},,error")
            status = EXIT_DATA
            continue
        p = classify(net, imageio.preprocess(img, net.arch.input_side, net.channel_means))[0]
        good = float(p[1])
        print(f"{path},{good:.6f},{'good' if p[1] > p[0] else 'bad'}")
    return status


def cmd_features(args):
    net = _load_ckpt(args.ckpt).net
    try:
        img = imageio.read_ppm(args.image)
    except (OSError, imageio.ImageFormatError) as exc:
        raise DataError(f"{args.image}: {exc}") from None
    x = imageio.preprocess(img, net.arch.input_side, net.channel_means)
    try:
        taps, density = tap_features(net, x)
    except TapUnavailable as exc:
        raise DataError(str(exc.args[0])) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for label, act in taps.items():
        name = "concat" if label == "concat" else f"tap{label}"
        grid = imageio.tile_feature_map(act)
        (out / f"{name}.pgm").write_bytes(imageio.encode_pgm(grid))
        print(f"{name}.shape={'x'.join(str(d) for d in act.shape)} {name}.image={grid.shape[1]}x{grid.shape[0]}")
    _emit(activation_density=f"{density:.6f}")
    return EXIT_OK


def cmd_gradcheck(args):
    ops = list(gradcheck.OP_CASES) if args.op == "all" else [args.op]
    if args.op != "all" and args.op not in gradcheck.OP_CASES:
        raise UsageError(f"unknown op {args.op!r}; choose from all, {', '.join(gradcheck.OP_CASES)}")
    sabotage = {s for s in os.environ.get("ILGNET_SABOTAGE", "").split(",") if s}
    engine.SABOTAGE.update(sabotage)
    failed = False
    try:
        for op in ops:
            r = gradcheck.check_op(op, args.trials, args.seed, args.eps, args.tol)
            failed |= not r.passed
            print(f"{op}.max_rel_err={r.worst:.3e} {op}.checked={r.checked} {op}.skipped={r.skipped} "
                  f"{op}.status={'pass' if r.passed else 'FAIL'}")
    finally:
        engine.SABOTAGE.difference_update(sabotage)
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_bench(args):
    arch = ArchVariant(_variant(args.variant), args.width, args.side)
    net = assemble(arch, seed=args.seed)
    x = np.random.default_rng(args.seed).standard_normal((args.batch, 3, args.side, args.side)).astype(np.float32)
    for _ in range(3):
        classify(net, x)
    times = []
    for _ in range(args.iters):
        t = time.perf_counter()
        classify(net, x)
        times.append((time.perf_counter() - t) / args.batch)
    _emit(
        variant=arch.variant.value,
        passes=len(times),
        batch=args.batch,
        mean_s_per_image=f"{np.mean(times):.6f}",
        min_s_per_image=f"{np.min(times):.6f}",
        max_s_per_image=f"{np.max(times):.6f}",
    )
    ref = REFERENCE_TEST_TIME.get(arch.variant)
    if ref is not None:
        print(
            f"note=reference GPU timings are {REFERENCE_TEST_TIME[Variant.ILGNET]}s "
            f"({Variant.ILGNET.value}) vs {REFERENCE_TEST_TIME[Variant.THIRD_GOOGLENET]}s "
            f"({Variant.THIRD_GOOGLENET.value}); only their closeness is expected to carry over"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ilgnet", description="Aesthetic-quality classifier with connected local/global features.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--rule", choices=synth.RULES, default="brightness")
    s.add_argument("--height", type=int, default=48)
    s.add_argument("--width", type=int, default=40)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="build an AVA1/AVA2 split CSV")
    s.add_argument("--metadata", required=True)
    s.add_argument("--protocol", choices=("ava1", "ava2"), required=True)
    s.add_argument("--delta", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--test-count", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train a variant on a split")
    s.add_argument("--split", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--variant")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--metrics")
    s.add_argument("--partition", default="train", choices=("train", "test"))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="accuracy and confusion matrix on a split partition")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--partition", default="test", choices=("train", "test"))
    s.add_argument("--variant")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("classify", help="label PPM images good or bad")
    s.add_argument("--ckpt", required=True)
    s.add_argument("images", nargs="+")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("features", help="render tap activations as PGM grids")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op")
    s.add_argument("--op", default="all")
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eps", type=float, default=gradcheck.DEFAULT_EPS)
    s.add_argument("--tol", type=float, default=gradcheck.DEFAULT_TOL)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="time inference forward passes")
    s.add_argument("--variant", default=Variant.ILGNET.value)
    s.add_argument("--iters", type=int, default=10)
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--width", type=float, default=1.0)
    s.add_argument("--side", type=int, default=224)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ilgnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"ilgnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"ilgnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
