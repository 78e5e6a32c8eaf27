"""Command-line entry point: ``mpt {train,finetune,analyze,infer,bench-select}``.

Exit codes: 0 ok, 2 invalid flags, 3 data/checkpoint error, 4 training
aborted, 5 dense/sparse prediction mismatch.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import nn
from .analysis import analyze, count_zero_kernels, score_histogram
from .bench import bench_selection
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_cifar10_splits, load_idx_dir, synth_splits
from .errors import ConfigError, FormatError, FullyPrunedError, TrainingAborted
from .sparse_infer import bench_inference, compact_model, sparse_forward
from .supermask import SelectionPolicy, powerprop_apply
from .trainer import TrainConfig, evaluate, finetune, predict, train_mpt, write_metrics

log = logging.getLogger("multiprize")

EXIT_FLAGS, EXIT_DATA, EXIT_ABORT, EXIT_MISMATCH = 2, 3, 4, 5

GRID = {
    "optimizer": ("sgd", "adam"),
    "schedule": ("multistep", "cosine", "constant"),
    "lr": (0.1, 0.01, 0.001, 0.0001),
    "batch_size": (64, 128, 256, 512),
    "scope": ("full", "last", "first"),
}
SCOPE_NAMES = {"first": "first_layer", "last": "last_layer", "full": "full_model"}


class DataError(Exception):
    pass


def _csv_floats(text):
    return [float(v) for v in text.split(",") if v]


def _csv_ints(text):
    return [int(float(v)) for v in text.split(",") if v]


def _shape(text):
    dims = tuple(int(v) for v in text.lower().replace("x", ",").split(",") if v)
    if len(dims) != 3:
        raise argparse.ArgumentTypeError("shape must be C,H,W")
    return dims


def _add_common(p):
    p.add_argument("--config", help="key=value file; explicit flags win")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data(p):
    p.add_argument("--dataset", choices=("cifar10", "idx", "synthetic"), default="synthetic")
    p.add_argument("--data", help="dataset directory (cifar10 / idx)")
    p.add_argument("--n-train", type=int, default=None, help="training subset size")
    p.add_argument("--n-test", type=int, default=None, help="test subset size")
    p.add_argument("--data-seed", type=int, default=None, help="synthetic data seed (default: --seed)")
    p.add_argument("--classes", type=int, default=2, help="synthetic classes")
    p.add_argument("--shape", type=_shape, default=(3, 16, 16), help="synthetic C,H,W")
    p.add_argument("--signal", type=float, default=0.5, help="synthetic class signal strength")


def _add_optim(p, lr, schedule, batch, momentum, wd):
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--lr-schedule", choices=("multistep", "cosine", "constant"), default=schedule)
    p.add_argument("--momentum", type=float, default=momentum)
    p.add_argument("--weight-decay", type=float, default=wd)
    p.add_argument("--batch-size", type=int, default=batch)
    p.add_argument("--no-timing", action="store_true", help="write epoch_time_s = 0 (byte-reproducible metrics)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpt", description="Multi-prize ticket training and analysis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train scores (weights stay at their random values)")
    _add_common(p)
    _add_data(p)
    p.add_argument("--arch", choices=sorted(nn.CONV_WIDTHS), default="conv2")
    p.add_argument("--prune-ratio", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--no-powerprop", action="store_true", help="bypass the power-propagation mapping entirely")
    p.add_argument("--select", choices=("topk", "threshold"), default="topk")
    p.add_argument("--theta", type=float, default=0.0)
    p.add_argument("--calibrate-theta", action="store_true", help="set theta once to the --prune-ratio quantile")
    p.add_argument("--scope", choices=("global", "layer"), default="global")
    p.add_argument("--score-bound", type=float, default=None, help="shared score init bound (default sqrt(6/fan_in))")
    p.add_argument("--epochs", type=int, default=5)
    _add_optim(p, lr=0.1, schedule="cosine", batch=64, momentum=0.9, wd=1e-4)
    p.add_argument("--out", help="output checkpoint (MPT1)")
    p.add_argument("--metrics", help="output metrics CSV")

    p = sub.add_parser("finetune", help="train weights with the mask frozen")
    _add_common(p)
    _add_data(p)
    p.add_argument("--ckpt", help="input checkpoint")
    p.add_argument("--scope", choices=tuple(SCOPE_NAMES), default="last")
    p.add_argument("--epochs", type=int, default=10)
    _add_optim(p, lr=0.001, schedule="cosine", batch=256, momentum=0.9, wd=0.0)
    p.add_argument("--out", help="output checkpoint")
    p.add_argument("--metrics", help="output metrics CSV")
    p.add_argument("--grid", action="store_true", help="run the full hyperparameter grid")
    p.add_argument("--grid-out", default="grid_results.csv")

    p = sub.add_parser("analyze", help="zero-kernel census, acceleration rate, score histograms")
    _add_common(p)
    p.add_argument("--ckpt")
    p.add_argument("--report", help="output JSON report")
    p.add_argument("--hist-dir", help="directory for histogram CSVs")
    p.add_argument("--bins", type=int, default=50)

    p = sub.add_parser("infer", help="dense and/or kernel-skipping inference")
    _add_common(p)
    _add_data(p)
    p.add_argument("--ckpt")
    p.add_argument("--mode", choices=("dense", "sparse", "both"), default="both")
    p.add_argument("--bench", action="store_true")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--bench-batch", type=int, default=64)
    p.add_argument("--bench-out", help="benchmark JSON path (default: stdout only)")

    p = sub.add_parser("bench-select", help="time sort- vs threshold-based selection")
    _add_common(p)
    p.add_argument("--sizes", type=_csv_ints, default=[10**6, 10**7])
    p.add_argument("--alphas", type=_csv_floats, default=[1.0, 2.0, 3.0])
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--prune-ratio", type=float, default=0.5)
    p.add_argument("--out", help="output CSV")
    return parser


REQUIRED = {
    "train": ("out", "metrics"),
    "finetune": ("ckpt",),
    "analyze": ("ckpt", "report"),
    "infer": ("ckpt",),
    "bench-select": ("out",),
}


def read_config(path) -> dict:
    out = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: expected key=value, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def parse(argv):
    """Parse flags, then re-parse with config-file values as defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        try:
            cfg = read_config(args.config)
        except (OSError, ConfigError) as exc:
            parser.error(str(exc))
        known = {a.dest: a for a in sub._actions}
        unknown = sorted(set(cfg) - set(known))
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        defaults = {}
        for key, value in cfg.items():
            action = known[key]
            if action.nargs == 0:
                defaults[key] = value.lower() in ("1", "true", "yes", "on")
            else:
                defaults[key] = action.type(value) if action.type else value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) in (None, "")]
    if args.command == "finetune" and not args.grid:
        missing += [k for k in ("out", "metrics") if not getattr(args, k)]
    if missing:
        parser.error("missing required flags: " + ", ".join("--" + m.replace("_", "-") for m in missing))
    if args.command == "infer" and args.bench:
        if args.mode != "both":
            parser.error("--bench needs --mode both")
        if args.repeats < 10:
            parser.error("--repeats must be >= 10 for --bench")
    return parser, args


def echo_config(args, path) -> None:
    with open(path + ".config", "w") as fh:
        for key, value in sorted(vars(args).items()):
            # skipped keys keep the echo loadable via --config
            if key in ("config", "command") or value is None:
                continue
            if isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            fh.write(f"{key}={value}\n")


def load_data(args, seed_default: int = 0):
    try:
        if args.dataset == "synthetic":
            seed = args.data_seed if args.data_seed is not None else seed_default
            return synth_splits(
                seed, args.n_train or 2000, args.n_test or 500, args.classes, args.shape, args.signal
            )
        if not args.data:
            raise DataError(f"--data DIR is required for --dataset {args.dataset}")
        if args.dataset == "cifar10":
            return load_cifar10_splits(args.data, args.n_train or 10_000, args.n_test)
        return load_idx_dir(args.data, args.n_train, args.n_test)
    except (OSError, FormatError) as exc:
        raise DataError(str(exc)) from exc


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except (OSError, FormatError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def run_train(args) -> int:
    if args.select == "topk":
        if args.calibrate_theta:
            raise ConfigError("--calibrate-theta needs --select threshold")
        policy = SelectionPolicy("topk_sort", "global" if args.scope == "global" else "layerwise", args.prune_ratio)
    else:
        policy = SelectionPolicy("threshold", "global" if args.scope == "global" else "layerwise", None, args.theta)
    config = TrainConfig(
        arch=args.arch,
        alpha=args.alpha,
        selection=policy,
        epochs=args.epochs,
        batch_size=args.batch_size,
        optimizer=args.optimizer,
        lr=args.lr,
        lr_schedule=args.lr_schedule,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        seed=args.seed,
        calibrate_theta=args.prune_ratio if args.calibrate_theta else None,
        bypass_powerprop=args.no_powerprop,
        score_bound=args.score_bound,
        timing=not args.no_timing,
    )
    train, test = load_data(args, args.seed)
    ckpt, metrics = train_mpt(config, train, test)
    save_checkpoint(ckpt, args.out)
    write_metrics(args.metrics, metrics)
    echo_config(args, args.out)
    print(f"final test accuracy {metrics[-1].test_accuracy:.4f}, prune ratio {metrics[-1].actual_prune_ratio:.4f}")
    return 0


def _finetune_config(args, **over) -> TrainConfig:
    base = dict(
        epochs=args.epochs,
        batch_size=args.batch_size,
        optimizer=args.optimizer,
        lr=args.lr,
        lr_schedule=args.lr_schedule,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        seed=args.seed,
        timing=not args.no_timing,
    )
    base.update(over)
    return TrainConfig(**base)


def run_finetune(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    train, test = load_data(args, ckpt.seed)
    if args.grid:
        rows = []
        for opt, sched, lr, bs, scope in itertools.product(*GRID.values()):
            cfg = _finetune_config(args, optimizer=opt, lr_schedule=sched, lr=lr, batch_size=bs)
            _, metrics = finetune(ckpt, SCOPE_NAMES[scope], cfg, train, test)
            rows.append((opt, sched, lr, bs, scope, metrics[-1].test_accuracy))
        with open(args.grid_out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["optimizer", "schedule", "lr", "batch_size", "scope", "final_accuracy"])
            for r in rows:
                w.writerow([*r[:5], f"{r[5]:.6f}"])
        best = max(rows, key=lambda r: r[5])
        print(f"grid cells: {len(rows)}")
        print("best: optimizer={} schedule={} lr={} batch_size={} scope={} final_accuracy={:.4f}".format(*best))
        echo_config(args, args.grid_out)
        return 0
    before = evaluate(ckpt, test)
    out, metrics = finetune(ckpt, SCOPE_NAMES[args.scope], _finetune_config(args), train, test)
    save_checkpoint(out, args.out)
    write_metrics(args.metrics, metrics)
    echo_config(args, args.out)
    print(f"accuracy before {before:.4f}, after {metrics[-1].test_accuracy:.4f}")
    return 0


def run_analyze(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    report = analyze(ckpt)
    if args.hist_dir:
        os.makedirs(args.hist_dir, exist_ok=True)
        for j, s in enumerate(ckpt.scores):
            score_histogram(s, args.bins).write_csv(os.path.join(args.hist_dir, f"layer{j}_raw.csv"))
            S = powerprop_apply(s.astype(np.float64), ckpt.alpha)
            score_histogram(S, args.bins).write_csv(os.path.join(args.hist_dir, f"layer{j}_effective.csv"))
        with open(os.path.join(args.hist_dir, "zero_kernels.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer_id", "zero_kernels", "total_kernels"])
            for j, (zero, total) in count_zero_kernels(ckpt.masks).items():
                w.writerow([j, zero, total])
    report.write_json(args.report)
    echo_config(args, args.report)
    print(
        f"zero-kernel fraction {report.zero_kernel_fraction:.4f}, "
        f"acceleration rate {report.acceleration_rate:.4f}, prune ratio {report.actual_prune_ratio:.4f}"
    )
    return 0


def run_infer(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    _, test = load_data(args, ckpt.seed)
    dtype = nn.get_dtype()
    eff = [w.astype(dtype) for w in ckpt.binarized()]
    images = test.images.astype(dtype)
    preds = {}
    if args.mode in ("dense", "both"):
        preds["dense"] = predict(ckpt.spec, eff, images)
    if args.mode in ("sparse", "both"):
        model = compact_model(ckpt, dtype=dtype)
        preds["sparse"] = np.concatenate(
            [sparse_forward(model, images[i : i + 500]).argmax(axis=1) for i in range(0, len(images), 500)]
        )
    for mode, p in preds.items():
        print(f"{mode} accuracy {float(np.mean(p == test.labels)):.6f}")
    if args.mode == "both" and not np.array_equal(preds["dense"], preds["sparse"]):
        n_bad = int(np.count_nonzero(preds["dense"] != preds["sparse"]))
        print(f"equivalence violation: {n_bad} predictions differ", file=sys.stderr)
        return EXIT_MISMATCH
    if args.bench:
        x = images[: args.bench_batch]
        result = bench_inference(compact_model(ckpt, False, dtype), compact_model(ckpt, True, dtype), x, args.repeats)
        text = json.dumps(result, indent=2)
        print(text)
        if args.bench_out:
            with open(args.bench_out, "w") as fh:
                fh.write(text + "\n")
    return 0


def run_bench_select(args) -> int:
    if args.iters < 1:
        raise ConfigError("--iters must be >= 1")
    rows = []
    for size in args.sizes:
        for alpha in args.alphas:
            r = bench_selection(size, alpha, args.iters, args.prune_ratio, args.seed)
            rows.append(r)
            print(f"size={size} alpha={alpha} sort={r['sort_ns'] / 1e6:.3f}ms threshold={r['threshold_ns'] / 1e6:.3f}ms ratio={r['ratio']:.3f}")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["size", "alpha", "sort_ns", "threshold_ns", "ratio", "masks_equal"])
        for r in rows:
            sort_ns, thr_ns = round(r["sort_ns"]), round(r["threshold_ns"])
            w.writerow([r["size"], r["alpha"], sort_ns, thr_ns, f"{sort_ns / thr_ns:.3f}", int(r["masks_equal"])])
    echo_config(args, args.out)
    return 0


COMMANDS = {
    "train": run_train,
    "finetune": run_finetune,
    "analyze": run_analyze,
    "infer": run_infer,
    "bench-select": run_bench_select,
}


def main(argv=None) -> int:
    parser, args = parse(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    nn.set_precision(args.precision)
    pin = args.command == "bench-select" or getattr(args, "bench", False)
    try:
        if pin:
            # benchmarks run single-threaded so BLAS threads don't skew the comparison
            with threadpool_limits(limits=1):
                return COMMANDS[args.command](args)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"mpt: error: {exc}", file=sys.stderr)
        return EXIT_FLAGS
    except DataError as exc:
        print(f"mpt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingAborted, FullyPrunedError) as exc:
        print(f"mpt: training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    finally:
        nn.set_precision("float32")


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
