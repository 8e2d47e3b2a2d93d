"""``ssip`` command line.

Subcommands: prepare, calibrate, train, evaluate, predict, sweep-support,
analyze, plot (and the hidden ``synth`` data generator). Failures exit with
status 1 and print one JSON error record to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import plots
from .calibration import load_curves
from .dataset import (
    ListenerBatch,
    by_listener,
    load_manifest,
    load_splits,
    save_manifest,
    split_by_listener,
)
from .errors import EmptyInput, SSIPError
from .fem import FeatureStore, make_backbone
from .metrics import listener_correlation_report
from .prepare import calibrate_samples, prepare
from .signal import DEFAULT_TARGET_SPL, LevelReference
from .spm import forward_batch
from .sweep import DEFAULT_COUNTS, run_sweep
from .synth import generate
from .training import Checkpoint, TrainConfig, evaluate, train

log = logging.getLogger("ssip")


def _json_default(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    raise TypeError(type(x))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _nan_to_none(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


def _fold(args):
    specs = {s.fold_index: s for s in load_splits(args.splits)}
    if args.fold not in specs:
        raise SSIPError(f"fold {args.fold} not in {args.splits}")
    return specs[args.fold]


def _config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {}
    for key in ("n_support", "seed", "epochs", "batch_size"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "deterministic", None) is not None:
        overrides["deterministic"] = args.deterministic
    if getattr(args, "mode", None):
        overrides["model"] = replace(cfg.model, mode=args.mode)
    if overrides.get("epochs") is not None and overrides["epochs"] < cfg.warmup_epochs:
        overrides["warmup_epochs"] = overrides["epochs"]
    return replace(cfg, **overrides) if overrides else cfg


# -- commands ----------------------------------------------------------------


def cmd_synth(args):
    summary = generate(args.out, args.listeners, args.per_listener, args.duration, seed=args.seed)
    print(f"wrote {summary['n_listeners'] * summary['per_listener']} clips to {args.out}")


def cmd_prepare(args):
    curves = load_curves(args.curves)
    samples = prepare(
        args.cpc, args.out, curves, audio_dir=args.audio_dir, target_spl=args.target_spl,
        ref=LevelReference(args.ref_spl), n_val=args.val_listeners, n_test=args.test_listeners,
        n_train=args.train_listeners, split_seed=args.seed,
    )
    print(f"wrote {len(samples)} records to {Path(args.out) / 'manifest.jsonl'}")


def cmd_calibrate(args):
    samples = calibrate_samples(load_manifest(args.manifest), load_curves(args.curves), args.target_spl)
    out = Path(args.out)
    save_manifest(out, samples, relative_to=str(out.resolve().parent))
    print(f"wrote {len(samples)} calibrated records to {out}")


def cmd_train(args):
    cfg = _config(args)
    spec = _fold(args)
    tr, va, _ = split_by_listener(load_manifest(args.manifest), spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_json())
    ckpt = train(cfg, tr, va, log_path=out / "train_log.jsonl")
    ckpt.save(out / "checkpoint.pt")
    print(json.dumps({"epoch": ckpt.epoch, "val": ckpt.val_metrics, "checksum": ckpt.checksum()}))


def cmd_evaluate(args):
    ckpt = Checkpoint.load(args.checkpoint)
    spec = _fold(args)
    _, _, te = split_by_listener(load_manifest(args.manifest), spec)
    n = args.n_support or ckpt.config.n_support
    records: list = []
    report = evaluate(ckpt, te, n, seed=args.seed, fold_index=spec.fold_index,
                      clamped=not args.unclamped, records=records)
    out = Path(args.out)
    _write_json(out / "metrics.json", report.to_json())
    with open(out / "predictions.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    print(f"rmse={report.rmse:.3f} ncc={report.ncc:.3f} n={report.n_queries}")


def cmd_predict(args):
    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.build_model()
    store = FeatureStore(make_backbone(ckpt.config.backbone, **ckpt.config.backbone_options))
    support = by_listener(s for s in load_manifest(args.support) if s.labeled)
    queries = by_listener(load_manifest(args.queries))
    with open(args.out, "w") as fh:
        for lid, qs in queries.items():
            if lid not in support and not model.baseline:
                raise EmptyInput(f"no support samples for listener {lid}")
            batch = ListenerBatch(lid, tuple(support.get(lid, ())), tuple(qs))
            for q, p in zip(qs, forward_batch(batch, model, store)):
                fh.write(json.dumps({
                    "sample_id": q.sample_id,
                    "listener_id": lid,
                    "n_support": batch.n_support,
                    "predicted_score": p.reported_score,
                    "raw_output": p.predicted_score,
                    "ground_truth": q.score if q.labeled else None,
                }, sort_keys=True) + "\n")
    print(f"wrote predictions to {args.out}")


def cmd_sweep(args):
    cfg = _config(args)
    specs = load_splits(args.splits)
    if args.folds:
        specs = [s for s in specs if s.fold_index in args.folds]
    result = run_sweep(cfg, load_manifest(args.manifest), specs, args.out, args.counts,
                       with_baseline=not args.no_baseline)
    plots.plot_sweep(result.to_json(), Path(args.out) / "sweep.png")
    print(result.table())


def cmd_analyze(args):
    samples = load_manifest(args.manifest)
    if not samples:
        raise EmptyInput(f"{args.manifest} has no records")
    report = _nan_to_none(listener_correlation_report(samples))
    out = Path(args.out)
    _write_json(out / "correlations.json", report)
    plots.plot_correlations(report, out)
    r1 = report["hl_vs_intelligibility"]["r"]
    r2 = report["hl_vs_rms"]["r"]
    print(json.dumps({"r_hl_vs_intelligibility": r1, "r_hl_vs_rms": r2}))


def cmd_plot(args):
    data = json.loads(Path(args.data).read_text())
    out = Path(args.out)
    if "counts" in data:
        out.parent.mkdir(parents=True, exist_ok=True)
        plots.plot_sweep(data, out)
    elif "scatter" in data:
        plots.plot_correlations(data, out)
    else:
        raise SSIPError(f"{args.data}: neither sweep nor correlation data")
    print(f"wrote {out}")


# -- parser ------------------------------------------------------------------


def _bool_flag(p, name, help):
    p.add_argument(f"--{name}", dest=name.replace("-", "_"), action=argparse.BooleanOptionalAction,
                   default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssip", description="Support-sample based intelligibility prediction")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth")  # hidden: no help entry
    p.add_argument("--out", required=True)
    p.add_argument("--listeners", type=int, default=31)
    p.add_argument("--per-listener", type=int, default=40)
    p.add_argument("--duration", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    sub._choices_actions = [a for a in sub._choices_actions if a.dest != "synth"]

    p = sub.add_parser("prepare", help="convert CPC-layout metadata into a calibrated manifest + folds")
    p.add_argument("--cpc", required=True, help="directory with listeners.json and metadata/")
    p.add_argument("--out", required=True)
    p.add_argument("--audio-dir", help="where <signal>.wav files live (default: <cpc>/audio)")
    p.add_argument("--curves", help="calibration curve file (default: bundled non-authoritative curves)")
    p.add_argument("--target-spl", type=float, default=DEFAULT_TARGET_SPL)
    p.add_argument("--ref-spl", type=float, default=100.0, help="dB SPL of a full-scale RMS of 1.0")
    p.add_argument("--train-listeners", type=int, default=None, help="default: all listeners not in val/test")
    p.add_argument("--val-listeners", type=int, default=3)
    p.add_argument("--test-listeners", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("calibrate", help="calibrate manifest scores to a common presentation level")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curves")
    p.add_argument("--target-spl", type=float, default=DEFAULT_TARGET_SPL)
    p.set_defaults(func=cmd_calibrate)

    def common(p, fold=True):
        p.add_argument("--config", help="JSON training config")
        p.add_argument("--manifest", required=True)
        p.add_argument("--splits", required=True)
        if fold:
            p.add_argument("--fold", type=int, default=1)
        p.add_argument("--n-support", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--mode", choices=("ssip", "audiogram_baseline"))
        p.add_argument("--out", required=True)
        _bool_flag(p, "deterministic", "force deterministic torch kernels")

    p = sub.add_parser("train", help="train one model on one fold")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a fold's test listeners")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--fold", type=int, default=1)
    p.add_argument("--n-support", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unclamped", action="store_true", help="score raw head outputs instead of [0, 100]")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="predict query scores from per-listener support sets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--support", required=True, help="manifest of scored support samples")
    p.add_argument("--queries", required=True, help="manifest of query samples")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep-support", help="train/evaluate across support counts and folds")
    common(p, fold=False)
    p.add_argument("--counts", type=lambda s: [int(x) for x in s.split(",")], default=list(DEFAULT_COUNTS))
    p.add_argument("--folds", type=lambda s: [int(x) for x in s.split(",")])
    p.add_argument("--no-baseline", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="hearing loss vs intelligibility / level correlations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plot", help="re-render figures from sweep.json or correlations.json")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (SSIPError, OSError, ValueError, KeyError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(record), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
