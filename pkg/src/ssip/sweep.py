"""Support-count sweep: one model per (support count, fold), plus an audiogram baseline."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .dataset import ListenerBatch, Sample, SplitSpec, by_listener, split_by_listener
from .fem import FeatureStore, make_backbone
from .metrics import ncc, rmse
from .training import Checkpoint, TrainConfig, _determinism, _evaluate_model, evaluate, train

log = logging.getLogger(__name__)

DEFAULT_COUNTS = (1, 2, 4, 8, 16, 32, 64)


@dataclass
class SweepResult:
    counts: list
    rmse: list  # mean over folds, one per count
    ncc: list
    rmse_pooled: list  # all folds' queries pooled
    ncc_pooled: list
    per_fold: dict = field(default_factory=dict)  # "n" -> [report json per fold]
    baseline: dict | None = None

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.counts, self.counts[1:])):
            raise ValueError("support counts must be strictly increasing")

    def to_json(self) -> dict:
        def clean(xs):
            return [None if (x is None or math.isnan(x)) else x for x in xs]

        return {
            "counts": list(self.counts),
            "rmse": clean(self.rmse),
            "ncc": clean(self.ncc),
            "rmse_pooled": clean(self.rmse_pooled),
            "ncc_pooled": clean(self.ncc_pooled),
            "per_fold": self.per_fold,
            "baseline": self.baseline,
        }

    def table(self) -> str:
        lines = ["n_support  rmse_mean  ncc_mean  rmse_pooled  ncc_pooled"]
        for row in zip(self.counts, self.rmse, self.ncc, self.rmse_pooled, self.ncc_pooled):
            lines.append("{:>9d}  {:>9.3f}  {:>8.3f}  {:>11.3f}  {:>10.3f}".format(*row))
        if self.baseline:
            b = self.baseline
            lines.append(f"baseline   {b['rmse']:>9.3f}  {_fmt(b['ncc']):>8}")
        return "\n".join(lines)


def _fmt(x):
    return "nan" if x is None else f"{x:.3f}"


def _mean(xs):
    return math.nan if any(math.isnan(x) for x in xs) else sum(xs) / len(xs)


def _train_or_load(cfg, tr, va, ckpt_path: Path, store) -> Checkpoint:
    if ckpt_path.exists():
        ckpt = Checkpoint.load(ckpt_path)
        if ckpt.config.to_json() == cfg.to_json():
            return ckpt
        log.info("config changed, retraining %s", ckpt_path)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    ckpt = train(cfg, tr, va, store=store, log_path=ckpt_path.with_name("train_log.jsonl"))
    ckpt.save(ckpt_path)
    return ckpt


def _all_query_episodes(samples: Sequence[Sample]) -> list[ListenerBatch]:
    return [ListenerBatch(lid, (), tuple(pool)) for lid, pool in by_listener(samples).items()]


def run_sweep(
    base: TrainConfig,
    samples: Sequence[Sample],
    folds: Sequence[SplitSpec],
    out_dir: str | Path,
    counts: Sequence[int] = DEFAULT_COUNTS,
    with_baseline: bool = True,
) -> SweepResult:
    """Train (or reuse) and evaluate a model for every support count on every fold.

    Checkpoints go to ``out_dir/n{count}/fold{k}/``; an existing checkpoint
    trained with the same config is reused.
    """
    out = Path(out_dir)
    counts = sorted(counts)
    store = FeatureStore(make_backbone(base.backbone, **base.backbone_options))
    splits = {spec.fold_index: split_by_listener(samples, spec) for spec in folds}

    means_r, means_c, pooled_r, pooled_c, per_fold = [], [], [], [], {}
    for n in counts:
        cfg = replace(base, n_support=n, batch_size=max(base.batch_size, n + 1))
        reports, preds, truth = [], [], []
        for k, (tr, va, te) in splits.items():
            ckpt = _train_or_load(cfg, tr, va, out / f"n{n}" / f"fold{k}" / "checkpoint.pt", store)
            records: list = []
            rep = evaluate(ckpt, te, n, seed=base.eval_seed, store=store, fold_index=k, records=records)
            reports.append(rep)
            preds += [r["reported_score"] for r in records]
            truth += [r["ground_truth"] for r in records]
            log.info("n=%d fold=%d rmse=%.3f ncc=%.3f", n, k, rep.rmse, rep.ncc)
        means_r.append(_mean([r.rmse for r in reports]))
        means_c.append(_mean([r.ncc for r in reports]))
        pooled_r.append(rmse(preds, truth))
        pooled_c.append(ncc(preds, truth))
        per_fold[str(n)] = [r.to_json() for r in reports]

    baseline = None
    if with_baseline:
        bcfg = replace(base, model=replace(base.model, mode="audiogram_baseline"))
        reports, preds, truth = [], [], []
        for k, (tr, va, te) in splits.items():
            ckpt = _train_or_load(bcfg, tr, va, out / "baseline" / f"fold{k}" / "checkpoint.pt", store)
            records: list = []
            model = ckpt.build_model()
            with _determinism(bcfg.deterministic):
                rep = _evaluate_model(model, store, _all_query_episodes(te), 0, True, k, records)
            reports.append(rep)
            preds += [r["reported_score"] for r in records]
            truth += [r["ground_truth"] for r in records]
        bn = [r.ncc for r in reports]
        baseline = {
            "rmse": _mean([r.rmse for r in reports]),
            "ncc": None if any(math.isnan(x) for x in bn) else _mean(bn),
            "rmse_pooled": rmse(preds, truth),
            "ncc_pooled": ncc(preds, truth),
            "per_fold": [r.to_json() for r in reports],
        }

    result = SweepResult(counts, means_r, means_c, pooled_r, pooled_c, per_fold, baseline)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n")
    return result
