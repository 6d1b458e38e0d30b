"""Command-line entry point: ``c2f <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cascade, pipeline as pl
from .model import load_weights

log = logging.getLogger("c2fnet")


def _config(args) -> pl.ExperimentConfig:
    cfg = pl.ExperimentConfig.from_file(args.config) if args.config else pl.ExperimentConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.workers is not None:
        over["workers"] = args.workers
    if args.precision is not None:
        over["precision"] = args.precision
    if args.cost is not None:
        over["cost"] = args.cost
    if args.output is not None:
        over["output_dir"] = args.output
    if args.data_root is not None:
        over["data_root"] = args.data_root
    return replace(cfg, **over) if over else cfg


def _tables(cfg):
    ws, _, _, vt, tt, prof = pl._prepare(cfg)
    return ws, vt, tt, prof


def cmd_train(args, cfg):
    ws = pl.Workspace(cfg)
    try:
        arch = pl.resolve_architecture(cfg)
        train, _, _ = pl.load_splits(cfg)
    except Exception as exc:  # noqa: BLE001
        raise pl.StageError("data", f"{type(exc).__name__}: {exc}") from exc
    store = pl.stage_features(ws, arch, train)
    pl.stage_classifiers(ws, arch, store, train)
    print(f"weights: {ws.path('weights.c2fw')}")


def cmd_table(args, cfg):
    ws, vt, tt, prof = _tables(cfg)
    acc = vt.level_accuracy()
    print(f"validation table: {len(vt)} examples, {vt.T} levels")
    for i, (a, c) in enumerate(zip(acc, prof.normalized), 1):
        print(f"  level {i}: accuracy {a:.4f}  normalized cost {c:.4f}")


def _print_rows(rows):
    for r in rows:
        g = ", ".join(f"{x:.4f}" for x in r["gamma"])
        lam = "-" if r["lam"] is None else f"{r['lam']:g}"
        print(f"{r['mode']:<18} lambda={lam:<5} gamma=[{g}] test_acc={r['test_accuracy']:.4f} "
              f"test_energy={r['test_energy_norm']:.4f}")


def cmd_tune(args, cfg):
    ws, vt, tt, _ = _tables(cfg)
    try:
        rows = pl.tune_rows(cfg, vt, tt, [args.lam], ws.root, single=cfg.warm_start_from_single)
    except Exception as exc:  # noqa: BLE001
        raise pl.StageError("tune", f"{type(exc).__name__}: {exc}") from exc
    row = [r for r in rows if r["mode"] == "multi_threshold"][0]
    out = ws.path(f"thresholds_lambda_{args.lam:g}.json")
    out.write_text(json.dumps(row, indent=2, sort_keys=True) + "\n")
    _print_rows([row])
    print(f"thresholds: {out}")


def cmd_sweep(args, cfg):
    lambdas = cfg.lambdas if args.lambdas is None else [float(v) for v in args.lambdas.split(",")]
    report = pl.run_pipeline(cfg, lambdas=lambdas)
    _print_rows(report.rows)
    print(f"report: {Path(cfg.output_dir) / 'report.csv'}")


def cmd_baseline(args, cfg):
    ws, vt, tt, _ = _tables(cfg)
    _print_rows(pl.baseline_rows(vt, tt, cfg.seed))


def cmd_single(args, cfg):
    lambdas = None if args.lambdas is None else [float(v) for v in args.lambdas.split(",")]
    _print_rows(pl.run_single_threshold_mode(cfg, lambdas))


def _read_image(path, shape):
    path = Path(path)
    if path.suffix == ".npy":
        x = np.load(path)
    else:
        from PIL import Image

        img = Image.open(path)
        img = img.convert("L" if shape[-1] == 1 else "RGB")
        x = np.asarray(img, dtype=np.float64) / 255.0
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    h, w = shape[:2]
    if x.shape[:2] != (h, w):  # zero-pad smaller images (28x28 digits) to the input size
        if x.shape[0] > h or x.shape[1] > w:
            raise ValueError(f"image {x.shape} larger than network input {tuple(shape)}")
        out = np.zeros((h, w, x.shape[2]))
        ph, pw = (h - x.shape[0]) // 2, (w - x.shape[1]) // 2
        out[ph:ph + x.shape[0], pw:pw + x.shape[1]] = x
        x = out
    if tuple(x.shape) != tuple(shape):
        raise ValueError(f"image shape {x.shape} does not match network input {tuple(shape)}")
    return x


def cmd_infer(args, cfg):
    try:
        arch = pl.resolve_architecture(cfg)
        weights = Path(args.weights) if args.weights else Path(cfg.output_dir) / "weights.c2fw"
        store = load_weights(weights, arch, cfg.dtype)
        if args.thresholds:
            src = Path(args.thresholds)
            g = json.loads(src.read_text())["gamma"] if src.exists() else \
                [float(v) for v in args.thresholds.split(",")]
        else:
            g = [cascade.NEVER_EXIT] * (arch.T - 1)
        x = _read_image(args.image, arch.input_shape).astype(cfg.dtype)
        trace = cascade.cascade_predict(x, arch, store, g, cfg.confidence_kind)
    except Exception as exc:  # noqa: BLE001
        raise pl.StageError("infer", f"{type(exc).__name__}: {exc}") from exc
    confs = ", ".join(f"{t:.4f}" for _, t in trace.per_level)
    print(f"label={trace.label} exit_level={trace.exit_level} confidences=[{confs}]")


def cmd_report(args, cfg):
    src = Path(args.input) if args.input else Path(cfg.output_dir) / "report.json"
    try:
        report = pl.load_report(src)
        written = pl.emit_report(report, args.dest or src.parent, tuple(args.format.split(",")))
    except Exception as exc:  # noqa: BLE001
        raise pl.StageError("report", f"{type(exc).__name__}: {exc}") from exc
    for p in written:
        print(p)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON config")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--cost", help="mac | latency | table:<csv>")
    common.add_argument("--output", help="artifact directory (overrides config)")
    common.add_argument("--data-root", help=f"dataset directory (else ${pl.DATA_ROOT_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="c2f", description="Coarse-to-fine early-exit networks.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train transformers, then classifiers")
    sub.add_parser("table", parents=[common], help="build validation/test evaluation tables")
    t = sub.add_parser("tune", parents=[common], help="tune thresholds for one lambda")
    t.add_argument("--lambda", dest="lam", type=float, required=True)
    s = sub.add_parser("sweep", parents=[common], help="full pipeline over many lambdas")
    s.add_argument("--lambdas", help="comma separated values")
    sub.add_parser("baseline", parents=[common], help="fixed-level rows")
    st = sub.add_parser("single-threshold", parents=[common], help="one shared threshold")
    st.add_argument("--lambdas", help="comma separated values")
    i = sub.add_parser("infer", parents=[common], help="classify one image")
    i.add_argument("--image", required=True, help=".npy array or image file")
    i.add_argument("--weights")
    i.add_argument("--thresholds", help="thresholds JSON from `tune`, or comma separated values")
    r = sub.add_parser("report", parents=[common], help="re-emit a saved report")
    r.add_argument("--input", help="report.json (default: <output>/report.json)")
    r.add_argument("--dest")
    r.add_argument("--format", default="json,csv,pareto")
    return p


COMMANDS = {"train": cmd_train, "table": cmd_table, "tune": cmd_tune, "sweep": cmd_sweep,
            "baseline": cmd_baseline, "single-threshold": cmd_single, "infer": cmd_infer,
            "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except Exception as exc:  # noqa: BLE001
        print(f"[config] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args, cfg)
    except pl.StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
