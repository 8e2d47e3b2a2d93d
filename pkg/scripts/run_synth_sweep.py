"""Support-count sweep on the synthetic dataset with the toy backbone.

Generates the data, prepares the manifest, then runs the full sweep
(n = 1..64 unless --counts is given) with the audiogram baseline.
"""

import argparse
import logging
from pathlib import Path

from ssip.dataset import load_manifest, load_splits
from ssip.plots import plot_sweep
from ssip.prepare import prepare
from ssip.sweep import DEFAULT_COUNTS, run_sweep
from ssip.synth import generate
from ssip.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/synth_sweep")
    ap.add_argument("--listeners", type=int, default=31)
    ap.add_argument("--per-listener", type=int, default=80)
    ap.add_argument("--counts", default=",".join(map(str, DEFAULT_COUNTS)))
    ap.add_argument("--epochs", type=int, default=50)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    if not (out / "prep" / "manifest.jsonl").exists():
        generate(out / "raw", args.listeners, args.per_listener)
        prepare(out / "raw", out / "prep")
    samples = load_manifest(out / "prep" / "manifest.jsonl")
    folds = load_splits(out / "prep" / "splits.json")
    counts = [int(c) for c in args.counts.split(",")]
    # batch must exceed the largest support count
    cfg = TrainConfig.toy(epochs=args.epochs, batch_size=max(32, 2 * max(counts)))
    result = run_sweep(cfg, samples, folds, out / "sweep", counts)
    plot_sweep(result.to_json(), out / "sweep" / "sweep.png")
    print(result.table())


if __name__ == "__main__":
    main()
