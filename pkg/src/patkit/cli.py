"""Command-line entry point: train, eval, bench, proptest, sample.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 property-suite failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from contextlib import ExitStack
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import ConfigError, PatkitError

log = logging.getLogger("patkit")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_PROPERTY = 0, 1, 2, 3
SYNTHETIC = ("shapes4", "parts4", "gestures3")
# default (train, test) sizes per class; streams per class for gestures
SYNTHETIC_SIZES = {"shapes4": (200, 50), "parts4": (200, 50), "gestures3": (10, 10)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# flag -> config key; None values are left untouched
FLAG_KEYS = {
    "task": "task",
    "points": "n_points",
    "groups": "g",
    "width": "c",
    "plan": "downsample_plan",
    "gsa_layers": "n_gsa",
    "classes": "m",
    "epochs": "optimizer.epochs",
    "lr": "optimizer.lr",
    "batch_size": "optimizer.batch_size",
    "seed": "seed",
    "attention": "attention",
    "embedding": "embedding",
    "norm": "norm",
    "k": "k",
    "fps_start": "fps_start",
}


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="'key = value' config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--task", choices=["classify", "segment"])
    p.add_argument("--points", type=int)
    p.add_argument("--groups", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--plan", help="down-sampling plan, e.g. fps96,gss32,gss16 (or 'none')")
    p.add_argument("--gsa-layers", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--attention", choices=["gsa", "mha"])
    p.add_argument("--embedding", choices=["arpe", "mlp"])
    p.add_argument("--norm", choices=["gn", "ln"])
    p.add_argument("--k", type=int)
    p.add_argument("--fps-start", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=["32", "64"], default="32")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--synthetic", choices=SYNTHETIC, help="generate a synthetic dataset")
    p.add_argument("--data", help="dataset manifest directory (index.tsv)")
    p.add_argument("--test-data", help="held-out manifest directory")
    p.add_argument("--n-train", type=int, help="synthetic clouds (or event streams) per class for training")
    p.add_argument("--n-test", type=int, help="synthetic clouds (or event streams) per class for testing")
    p.add_argument("--outliers", type=float, default=0.0, help="synthetic outlier fraction")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="patkit", description="Point attention transformers on numpy.")
    parser.add_argument("--version", action="version", version=f"patkit {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write checkpoint + metrics")
    _add_model_flags(p)
    _add_data_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", default="runs/train")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="config file that must match the checkpoint")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    _add_data_flags(p)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--infer-noise", action="store_true", help="keep Gumbel noise in GSS at inference")
    p.add_argument("--out", help="directory for confusion.csv and report.json")

    p = sub.add_parser("bench", help="parameter counts and forward latency")
    _add_model_flags(p)
    p.add_argument("--group-list", default="1,2,4,8,16", help="group counts for the size table")
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--out", help="write bench.csv and latency.json here")

    p = sub.add_parser("proptest", help="run the invariant suite")
    p.add_argument("--only", help="comma-separated property names")
    p.add_argument("--trials", type=int, help="cases (or Monte-Carlo draws) per property")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replay", type=int, help="re-run a single recorded case seed")
    p.add_argument("--out", default="proptest-failures", help="counterexample dump directory")
    p.add_argument("--list", action="store_true", help="list property names and exit")

    p = sub.add_parser("sample", help="dump FPS and GSS index sets for plotting")
    p.add_argument("--checkpoint", help="trained model (default: fresh model from flags)")
    _add_model_flags(p)
    p.add_argument("--input", help="point-cloud text file (default: synthetic sphere)")
    p.add_argument("--n-input", type=int, default=256)
    p.add_argument("--outliers", type=float, default=0.02)
    p.add_argument("--n-fps", type=int, default=32)
    p.add_argument("--n-gss", type=int, default=32)
    p.add_argument("--out", default="runs/sample")
    return parser


# -- config resolution -------------------------------------------------------------


def _parse_sets(items: list[str]) -> dict[str, str]:
    pairs = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def resolve_config(args, base=None):
    from .model.config import PATConfig, apply_overrides, read_config

    cfg = base or PATConfig()
    if getattr(args, "config", None):
        cfg = apply_overrides(cfg, read_config(args.config))
    flags = {}
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            flags[key] = str(value)
    if getattr(args, "task", None) == "segment" and "downsample_plan" not in flags:
        flags["downsample_plan"] = "none"
        flags.setdefault("n_gsa", "5")
        flags["augment"] = "false"
    if getattr(args, "synthetic", None) == "gestures3":
        flags.setdefault("f", "1")
        flags.setdefault("m", "3")
        flags.setdefault("augment", "false")
    flags.update(_parse_sets(getattr(args, "set", [])))
    return apply_overrides(cfg, flags).validate()


def write_frozen_config(out: Path, cfg) -> None:
    from .model.config import format_config

    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")


# -- data -----------------------------------------------------------------------------


def load_data(args, cfg):
    """(train, test, extra) for the requested source; extra carries stream labels for events."""
    from . import dataio

    seed = cfg.seed
    if args.data:
        train = dataio.load_manifest(args.data)
        test = dataio.load_manifest(args.test_data) if args.test_data else train
        return train, test, {}
    kind = args.synthetic or ("parts4" if cfg.task == "segment" else "shapes4")
    n = cfg.n_points
    n_train, n_test = SYNTHETIC_SIZES[kind]
    n_train = args.n_train if args.n_train is not None else n_train
    n_test = args.n_test if args.n_test is not None else n_test
    if kind == "shapes4":
        train = dataio.gen_shapes(n_per_class=n_train, n_points=n, outlier_frac=args.outliers, rng=seed)
        test = dataio.gen_shapes(n_per_class=n_test, n_points=n, outlier_frac=args.outliers, rng=seed + 10_000)
        return train, test, {}
    if kind == "parts4":
        train = dataio.gen_parts(n_train, n, rng=seed)
        test = dataio.gen_parts(n_test, n, rng=seed + 10_000)
        return train, test, {}
    spec = dataio.ClipSpec(n_sample=n)
    tr_streams, tr_labels = dataio.gen_gesture_streams(n_train, rng=seed)
    te_streams, te_labels = dataio.gen_gesture_streams(n_test, rng=seed + 10_000)
    train = dataio.clips_dataset(tr_streams, tr_labels, spec, rng=seed)
    test = dataio.clips_dataset(te_streams, te_labels, spec, rng=seed + 1)
    return train, test, {"train_streams": tr_labels, "test_streams": te_labels}


# -- commands -------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .core import tensor as T
    from .model import build_model, evaluate, load_checkpoint, train

    cfg = resolve_config(args)
    out = Path(args.out)
    write_frozen_config(out, cfg)
    train_set, test_set, extra = load_data(args, cfg)
    state = None
    if args.resume:
        model, cfg_ck, state = load_checkpoint(args.resume, cfg)
    else:
        model = build_model(cfg)
    start = time.perf_counter()
    with ExitStack() as stack:
        if args.precision == "64":
            stack.enter_context(T.precision(np.float64))
            model.to(np.float64)
        state = train(model, train_set, cfg, out_dir=out, state=state)
    acc, preds = evaluate(model, test_set)
    report = {"test_acc": acc, "epochs": state.epoch, "steps": state.step, "seconds": time.perf_counter() - start}
    if "test_streams" in extra:
        from .dataio import stream_accuracy

        report["stream_acc"] = stream_accuracy(preds, test_set.groups, extra["test_streams"])
    (out / "report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in report.items()))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataio import stream_accuracy
    from .model import load_checkpoint
    from .model.config import apply_overrides, read_config
    from .model.train import confusion_matrix, evaluate, mean_iou

    model, cfg, _ = load_checkpoint(args.checkpoint)
    if args.config or args.set:
        wanted = cfg
        if args.config:
            wanted = apply_overrides(wanted, read_config(args.config))
        wanted = apply_overrides(wanted, _parse_sets(args.set)).validate()
        model, cfg, _ = load_checkpoint(args.checkpoint, wanted)
    if args.infer_noise:
        model.infer_noise = True
    ns = argparse.Namespace(**vars(args))
    train_set, test_set, extra = load_data(ns, cfg)
    data = train_set if args.split == "train" else test_set
    rng = np.random.default_rng(args.seed)
    acc, preds = evaluate(model, data, rng=rng)
    report = {"accuracy": acc, "samples": len(data)}
    if cfg.task == "segment":
        report["mean_iou"] = mean_iou(data.labels, preds, cfg.m)
    key = f"{args.split}_streams"
    if key in extra:
        report["stream_accuracy"] = stream_accuracy(preds, data.groups, extra[key])
    print(json.dumps(report))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cm = confusion_matrix(data.labels, preds, cfg.m)
        with (out / "confusion.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\pred"] + list(range(cfg.m)))
            for i, row in enumerate(cm):
                w.writerow([i] + row.tolist())
        (out / "report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    return EXIT_OK


def bench_rows(c: int, groups: list[int], heads: int) -> list[dict]:
    """Closed-form per-block counts: GSA over group counts, MHA-LG and MHA-SM."""
    from .attention import gsa_param_count, mha_param_count, mha_small_width

    rows = [{"block": f"GSA(c={c},g={g})", "width": c, "params": gsa_param_count(c, g)} for g in groups if c % g == 0]
    rows.append({"block": f"MHA-LG(c={c},H={heads})", "width": c, "params": mha_param_count(c, heads)})
    ref_g = 8 if c % 8 == 0 else groups[-1]
    sm = mha_small_width(c, ref_g, heads)
    rows.append({"block": f"MHA-SM(c={sm},H={heads})", "width": sm, "params": mha_param_count(sm, heads)})
    return rows


def cmd_bench(args) -> int:
    from .core import tensor as T
    from .dataio import gen_shapes
    from .model import build_model, param_count

    cfg = resolve_config(args)
    groups = [int(g) for g in args.group_list.split(",") if g.strip()]
    rows = bench_rows(cfg.c, groups, args.heads)
    print(f"{'block':<24}{'width':>8}{'params':>12}")
    for r in rows:
        print(f"{r['block']:<24}{r['width']:>8}{r['params']:>12}")
    model = build_model(cfg).eval()
    counts = param_count(model)
    print("model parameters: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    pts = gen_shapes(n_per_class=max(1, args.batch // 4 + 1), n_points=cfg.n_points, rng=cfg.seed).points[: args.batch]
    if cfg.f:
        pts = np.concatenate([pts, np.zeros(pts.shape[:2] + (cfg.f,), dtype=pts.dtype)], axis=-1)
    times = []
    with T.no_grad():
        for i in range(args.warmup + args.runs):
            t0 = time.perf_counter()
            model(pts)
            if i >= args.warmup:
                times.append((time.perf_counter() - t0) * 1000)
    lat = {"batch": int(len(pts)), "runs": args.runs, "median_ms": float(np.median(times)), "p90_ms": float(np.percentile(times, 90))}
    print(f"forward latency batch={lat['batch']}: median {lat['median_ms']:.2f} ms, p90 {lat['p90_ms']:.2f} ms")
    if args.out:
        out = Path(args.out)
        write_frozen_config(out, cfg)
        with (out / "bench.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["block", "width", "params"])
            w.writeheader()
            w.writerows(rows)
        (out / "latency.json").write_text(json.dumps({**lat, "param_count": counts}, indent=2), encoding="utf-8")
    return EXIT_OK


def cmd_proptest(args) -> int:
    from . import proptest

    if args.list:
        for p in proptest.REGISTRY.values():
            print(f"{p.name:<24} {p.doc}")
        return EXIT_OK
    only = [s.strip() for s in args.only.split(",")] if args.only else None
    try:
        props = proptest.select(only)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    results = proptest.run_suite([p.name for p in props], args.seed, args.trials, args.replay, args.out)
    print(proptest.format_report(results))
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} propert{'y' if len(failed) == 1 else 'ies'} failed; counterexamples in {args.out}/")
        return EXIT_PROPERTY
    return EXIT_OK


def cmd_sample(args) -> int:
    from .core import tensor as T
    from .dataio import gen_shapes, load_point_cloud, save_point_cloud
    from .geometry import fps
    from .model import build_model, load_checkpoint
    from .sampling import GssLayer, SamplerConfig, gss

    seed = args.seed if args.seed is not None else 0
    if args.checkpoint:
        model, cfg, _ = load_checkpoint(args.checkpoint)
    else:
        cfg = resolve_config(args)
        model = build_model(cfg)
    model.eval()
    if args.input:
        cloud = load_point_cloud(args.input).points
    else:
        data = gen_shapes(["sphere"], 1, args.n_input, outlier_frac=args.outliers, rng=seed)
        cloud = data.points[0].astype(np.float64)
    if cloud.shape[1] != 3 + cfg.f:
        raise ConfigError(f"cloud has {cloud.shape[1]} columns, model expects {3 + cfg.f}")
    out = Path(args.out)
    write_frozen_config(out, cfg)
    save_point_cloud(out / "cloud.txt", cloud)
    fps_idx = fps(cloud, min(args.n_fps, len(cloud)), cfg.fps_start)
    (out / "fps.txt").write_text("".join(f"{i}\n" for i in fps_idx.tolist()), encoding="utf-8")
    with T.no_grad():
        x = model.blocks[0](model.embed(cloud)) if model.blocks else model.embed(cloud)
        layer = model.samplers[0] if model.samplers else GssLayer(cfg.c, min(args.n_gss, len(cloud)), np.random.default_rng(seed))
        _, trace = gss(x, layer, SamplerConfig(mode="infer"))
    lines = "".join(f"{i} {m!r}\n" for i, m in zip(trace.indices.tolist(), trace.margins.tolist()))
    (out / "gss.txt").write_text("# index margin\n" + lines, encoding="utf-8")
    print(f"wrote {out}/cloud.txt, fps.txt, gss.txt ({trace.duplicates} duplicate GSS picks)")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "proptest": cmd_proptest,
    "sample": cmd_sample,
}


def _thread_limit():
    value = os.environ.get("PATKIT_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"PATKIT_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError("PATKIT_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with ExitStack() as stack:
            limiter = _thread_limit()
            if limiter is not None:
                stack.enter_context(limiter)
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PatkitError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
