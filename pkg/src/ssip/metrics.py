"""RMSE / Pearson correlation and listener-level correlation analyses."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .calibration import average_hearing_loss
from .errors import EmptyInput, IncompleteAudiogram, ShapeError


def _pair(pred, truth, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ShapeError(f"length mismatch: {pred.size} vs {truth.size}")
    if pred.size < min_len:
        raise EmptyInput(f"need at least {min_len} values, got {pred.size}")
    return pred, truth


def rmse(pred: Sequence[float], truth: Sequence[float]) -> float:
    pred, truth = _pair(pred, truth, 1)
    return float(np.sqrt(np.mean(np.square(pred - truth))))


def ncc(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Pearson correlation; NaN when either input has zero variance."""
    pred, truth = _pair(pred, truth, 2)
    # exact test: mean subtraction leaves round-off residue on constant inputs
    if np.ptp(pred) == 0.0 or np.ptp(truth) == 0.0:
        return math.nan
    dp = pred - pred.mean()
    dt = truth - truth.mean()
    denom = math.sqrt(float(np.dot(dp, dp))) * math.sqrt(float(np.dot(dt, dt)))
    if denom == 0.0:
        return math.nan
    return float(np.clip(np.dot(dp, dt) / denom, -1.0, 1.0))


@dataclass
class ListenerMetrics:
    rmse: float
    ncc: float
    n: int


@dataclass
class MetricsReport:
    rmse: float
    ncc: float
    n_queries: int
    per_listener: dict[str, ListenerMetrics]
    n_support: int
    clamped: bool = True
    fold_index: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def ncc_defined(self) -> bool:
        return not math.isnan(self.ncc)

    def to_json(self) -> dict:
        d = asdict(self)
        d["ncc_defined"] = self.ncc_defined
        # NaN is not valid JSON
        d["ncc"] = None if math.isnan(self.ncc) else self.ncc
        for v in d["per_listener"].values():
            if math.isnan(v["ncc"]):
                v["ncc"] = None
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, d: Mapping) -> "MetricsReport":
        def num(x):
            return math.nan if x is None else float(x)

        per = {k: ListenerMetrics(num(v["rmse"]), num(v["ncc"]), int(v["n"])) for k, v in d["per_listener"].items()}
        return cls(
            rmse=float(d["rmse"]),
            ncc=num(d["ncc"]),
            n_queries=int(d["n_queries"]),
            per_listener=per,
            n_support=int(d["n_support"]),
            clamped=bool(d["clamped"]),
            fold_index=int(d["fold_index"]),
            meta=dict(d.get("meta") or {}),
        )


def build_report(
    listener_ids: Sequence[str],
    pred: Sequence[float],
    truth: Sequence[float],
    n_support: int,
    clamped: bool = True,
    fold_index: int = 0,
) -> MetricsReport:
    """Pool all queries for the headline numbers; per-listener values alongside."""
    pred, truth = _pair(pred, truth, 1)
    ids = np.asarray(listener_ids)
    per = {}
    for lid in sorted(set(ids.tolist())):
        m = ids == lid
        per[lid] = ListenerMetrics(
            rmse(pred[m], truth[m]),
            ncc(pred[m], truth[m]) if m.sum() >= 2 else math.nan,
            int(m.sum()),
        )
    return MetricsReport(
        rmse=rmse(pred, truth),
        ncc=ncc(pred, truth) if pred.size >= 2 else math.nan,
        n_queries=int(pred.size),
        per_listener=per,
        n_support=n_support,
        clamped=clamped,
        fold_index=fold_index,
    )


def aggregate_folds(reports: Sequence[MetricsReport], pooled_pred=None, pooled_truth=None) -> dict:
    """Fold summary as mean of per-fold values and, where possible, pooled over folds.

    Pooled RMSE follows from the per-fold query counts; pooled NCC needs the
    concatenated predictions and targets.
    """
    if not reports:
        raise EmptyInput("no fold reports")
    n = np.array([r.n_queries for r in reports], dtype=np.float64)
    mse = np.array([r.rmse**2 for r in reports])
    nccs = [r.ncc for r in reports]
    out = {
        "folds": [r.fold_index for r in reports],
        "rmse_per_fold": [r.rmse for r in reports],
        "ncc_per_fold": [None if math.isnan(x) else x for x in nccs],
        "rmse_mean_of_folds": float(np.mean([r.rmse for r in reports])),
        "ncc_mean_of_folds": None if any(math.isnan(x) for x in nccs) else float(np.mean(nccs)),
        "rmse_pooled": float(np.sqrt(np.sum(mse * n) / n.sum())),
    }
    if pooled_pred is not None:
        pooled = ncc(pooled_pred, pooled_truth)
        out["ncc_pooled"] = None if math.isnan(pooled) else pooled
    return out


def linear_fit(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Least-squares (slope, intercept); NaNs when x is constant."""
    x, y = _pair(x, y, 2)
    dx = x - x.mean()
    sxx = float(np.dot(dx, dx))
    if sxx == 0.0:
        return math.nan, math.nan
    slope = float(np.dot(dx, y - y.mean()) / sxx)
    return slope, float(y.mean() - slope * x.mean())


def listener_correlation_report(samples: Iterable) -> dict:
    """Per-listener hearing loss vs mean intelligibility and vs mean audio level.

    Returns Pearson r (NaN when undefined), the regression line of each
    relationship, and the per-listener scatter points.
    """
    groups: dict[str, list] = {}
    for s in samples:
        groups.setdefault(s.listener_id, []).append(s)
    if not groups:
        raise EmptyInput("no samples")

    rows = []
    for lid, items in sorted(groups.items()):
        audiogram = next((s.audiogram for s in items if s.audiogram is not None), None)
        if audiogram is None:
            raise IncompleteAudiogram(f"listener {lid} has no audiogram")
        scores = [s.raw_score if s.raw_score is not None else s.score for s in items if s.labeled]
        levels = [s.level for s in items if s.level is not None]
        if not scores or not levels:
            raise EmptyInput(f"listener {lid} lacks scored samples or level metadata")
        rows.append((lid, average_hearing_loss(audiogram), float(np.mean(scores)), float(np.mean(levels))))

    hl = [r[1] for r in rows]
    intel = [r[2] for r in rows]
    level = [r[3] for r in rows]

    def relation(y):
        if len(rows) < 2:
            return {"r": math.nan, "slope": math.nan, "intercept": math.nan}
        slope, intercept = linear_fit(hl, y)
        return {"r": ncc(hl, y), "slope": slope, "intercept": intercept}

    return {
        "hl_vs_intelligibility": relation(intel),
        "hl_vs_rms": relation(level),
        "scatter": [
            {"listener_id": lid, "hl": h, "mean_intelligibility": i, "mean_level": lv}
            for lid, h, i, lv in rows
        ],
    }
