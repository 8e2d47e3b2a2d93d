"""Episode-based training and fixed-episode evaluation."""

from __future__ import annotations

import contextlib
import copy
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import ListenerBatch, Sample, by_listener, eval_episodes, sample_training_batch
from .errors import DivergenceError, FormatError, InsufficientSamples, LeakageError, RangeError
from .fem import FeatureStore, ModelConfig, make_backbone, parameter_checksum
from .metrics import MetricsReport, build_report
from .spm import SCORE_SCALE, Prediction, SSIPNet, forward_batch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ssip-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.98
    warmup_epochs: int = 10
    warmup_start_factor: float = 0.1
    batch_size: int = 128
    n_support: int = 64
    huber_delta: float = 1.0
    seed: int = 0
    eval_seed: int = 0
    backbone: str = "foundation"  # "foundation" | "toy"
    backbone_options: dict = field(default_factory=dict)
    grad_clip: float | None = 1.0
    deterministic: bool = True
    steps_per_epoch: int | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if not 1 <= self.n_support < self.batch_size:
            raise ValueError(f"need 1 <= n_support < batch_size, got {self.n_support}, {self.batch_size}")
        if self.epochs < self.warmup_epochs:
            raise ValueError("epochs must be >= warmup_epochs")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")

    @property
    def mode(self) -> str:
        return self.model.mode

    def to_json(self) -> dict:
        d = asdict(self)
        d["model"]["audiogram_freqs"] = list(self.model.audiogram_freqs)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise FormatError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrainConfig":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Small settings for the synthetic dataset and the toy backbone."""
        model = ModelConfig(n_layers=4, d1=16, d2=32, heads=4, dropout=0.0)
        if "model" in overrides:
            m = overrides.pop("model")
            model = ModelConfig(**{**asdict(model), **m}) if isinstance(m, dict) else m
        base = dict(
            epochs=50, learning_rate=1e-3, warmup_epochs=5, batch_size=32,
            n_support=8, backbone="toy", model=model,
        )
        base.update(overrides)
        return cls(**base)


def huber_loss(pred: float, target: float, delta: float = 1.0) -> float:
    if delta <= 0:
        raise ValueError("delta must be positive")
    e = abs(pred - target)
    if e <= delta:
        return 0.5 * e * e
    return delta * (e - 0.5 * delta)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Per-epoch learning rate: linear warmup from ``start_factor * lr`` then cosine to zero."""
    if not 0 <= epoch < cfg.epochs:
        raise RangeError(f"epoch {epoch} outside [0, {cfg.epochs})")
    lr = cfg.learning_rate
    if epoch < cfg.warmup_epochs:
        f0 = cfg.warmup_start_factor
        return lr * (f0 + (1.0 - f0) * epoch / cfg.warmup_epochs)
    span = cfg.epochs - cfg.warmup_epochs
    return max(0.0, lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - cfg.warmup_epochs) / span)))


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    state_dict: dict
    config: TrainConfig
    epoch: int
    val_metrics: dict = field(default_factory=dict)
    train_listeners: tuple = ()
    val_listeners: tuple = ()
    data_hash: str = ""
    curves_hash: str = ""
    history: list = field(default_factory=list)

    def build_model(self) -> SSIPNet:
        model = SSIPNet(self.config.model)
        dtype = next(iter(self.state_dict.values())).dtype
        model.to(dtype).load_state_dict(self.state_dict)
        return model.eval()

    def checksum(self) -> str:
        return parameter_checksum(self.state_dict)

    def save(self, path: str | os.PathLike) -> None:
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "version": CHECKPOINT_VERSION,
                "state_dict": self.state_dict,
                "config": self.config.to_json(),
                "epoch": self.epoch,
                "val_metrics": self.val_metrics,
                "train_listeners": list(self.train_listeners),
                "val_listeners": list(self.val_listeners),
                "data_hash": self.data_hash,
                "curves_hash": self.curves_hash,
                "history": self.history,
            },
            os.fspath(path),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        blob = torch.load(os.fspath(path), map_location="cpu", weights_only=True)
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"{path}: not an ssip checkpoint")
        if blob.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {blob.get('version')}")
        return cls(
            state_dict=blob["state_dict"],
            config=TrainConfig.from_json(blob["config"]),
            epoch=blob["epoch"],
            val_metrics=blob["val_metrics"],
            train_listeners=tuple(blob["train_listeners"]),
            val_listeners=tuple(blob["val_listeners"]),
            data_hash=blob["data_hash"],
            curves_hash=blob["curves_hash"],
            history=blob["history"],
        )


def samples_hash(samples: Sequence[Sample]) -> str:
    h = hashlib.sha256()
    for s in sorted(samples, key=lambda s: s.sample_id):
        h.update(json.dumps(s.to_json(), sort_keys=True).encode())
    return h.hexdigest()


# -- loops ---------------------------------------------------------------------


@contextlib.contextmanager
def _determinism(enabled: bool):
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def _batch_loss(model: SSIPNet, store: FeatureStore, support, queries, targets, delta: float):
    if model.baseline:
        out = model.query_outputs(store, queries, None)
    else:
        out = model.query_outputs(store, queries, model.support_aggregate(store, support))
    target = torch.tensor(targets, dtype=out.dtype) / SCORE_SCALE
    return F.huber_loss(out, target, delta=delta), out


def train(
    cfg: TrainConfig,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample] = (),
    store: FeatureStore | None = None,
    log_path: str | os.PathLike | None = None,
    curves_hash: str = "",
    dtype: torch.dtype = torch.float32,
) -> Checkpoint:
    """Train on listener episodes; keep the weights with the best validation RMSE.

    Each step draws a training listener uniformly, then a support/query batch
    from that listener. Listeners with fewer than ``batch_size`` samples give
    batches with fewer queries (support count stays ``n_support``). In baseline
    mode batches are ``batch_size`` independent samples from all listeners.
    Without validation data the final epoch is returned.
    """
    train_samples = [s for s in train_samples if s.labeled]
    val_samples = [s for s in val_samples if s.labeled]
    if not train_samples:
        raise InsufficientSamples("no labeled training samples")
    overlap = {s.listener_id for s in train_samples} & {s.listener_id for s in val_samples}
    if overlap:
        raise LeakageError(f"listeners in both training and validation: {sorted(overlap)}")

    pools = by_listener(train_samples)
    listeners = list(pools)
    if not cfg.model.mode == "audiogram_baseline":
        small = [k for k, v in pools.items() if len(v) <= cfg.n_support]
        if small:
            raise InsufficientSamples(f"listeners {small} have <= n_support={cfg.n_support} samples")

    if store is None:
        store = FeatureStore(make_backbone(cfg.backbone, **cfg.backbone_options), dtype=dtype)
    steps = cfg.steps_per_epoch or max(1, len(train_samples) // cfg.batch_size)
    val_eps = eval_episodes(val_samples, cfg.n_support, cfg.eval_seed) if val_samples else []

    log_fh = open(log_path, "w") if log_path else None
    with _determinism(cfg.deterministic):
        torch.manual_seed(cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        model = SSIPNet(cfg.model).to(dtype)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))

        best_state, best_epoch, best_rmse, best_metrics = None, -1, math.inf, {}
        history = []
        try:
            for epoch in range(cfg.epochs):
                lr = lr_at(epoch, cfg)
                for group in opt.param_groups:
                    group["lr"] = lr
                model.train()
                losses = []
                for _ in range(steps):
                    if model.baseline:
                        idx = rng.choice(len(train_samples), size=min(cfg.batch_size, len(train_samples)), replace=False)
                        support, queries = (), [train_samples[i] for i in idx]
                    else:
                        pool = pools[listeners[rng.integers(len(listeners))]]
                        batch = sample_training_batch(pool, cfg.n_support, min(cfg.batch_size, len(pool)), rng)
                        support, queries = batch.support, batch.queries
                    loss, _ = _batch_loss(model, store, support, queries, [q.score for q in queries], cfg.huber_delta)
                    if not torch.isfinite(loss):
                        raise DivergenceError(f"non-finite loss at epoch {epoch}")
                    opt.zero_grad()
                    loss.backward()
                    if cfg.grad_clip:
                        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                    opt.step()
                    losses.append(loss.item())

                entry = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses))}
                if val_eps:
                    report = _evaluate_model(model, store, val_eps, cfg.n_support)
                    entry["val_rmse"] = report.rmse
                    entry["val_ncc"] = None if math.isnan(report.ncc) else report.ncc
                    if report.rmse < best_rmse:
                        best_rmse, best_epoch = report.rmse, epoch
                        best_state = copy.deepcopy(model.state_dict())
                        best_metrics = {"rmse": report.rmse, "ncc": entry["val_ncc"]}
                history.append(entry)
                log.info("epoch %d %s", epoch, entry)
                if log_fh:
                    log_fh.write(json.dumps(entry) + "\n")
                    log_fh.flush()
        finally:
            if log_fh:
                log_fh.close()

    if best_state is None:
        best_state, best_epoch = copy.deepcopy(model.state_dict()), cfg.epochs - 1
    return Checkpoint(
        state_dict=best_state,
        config=cfg,
        epoch=best_epoch,
        val_metrics=best_metrics,
        train_listeners=tuple(sorted(pools)),
        val_listeners=tuple(sorted({s.listener_id for s in val_samples})),
        data_hash=samples_hash(train_samples + val_samples),
        curves_hash=curves_hash,
        history=history,
    )


def _evaluate_model(model, store, episodes, n_support, clamped=True, fold_index=0, records=None):
    def predict(batch):
        return forward_batch(batch, model, store)

    return evaluate_predictor(predict, episodes, n_support, clamped, fold_index, records)


def evaluate_predictor(
    predict: Callable[[ListenerBatch], list[Prediction]],
    episodes: Sequence[ListenerBatch],
    n_support: int,
    clamped: bool = True,
    fold_index: int = 0,
    records: list | None = None,
) -> MetricsReport:
    """Score any episode predictor; ``records`` (if given) receives one dict per query."""
    ids, preds, truth = [], [], []
    for batch in episodes:
        out = predict(batch)
        if len(out) != len(batch.queries):
            raise RuntimeError(f"predictor returned {len(out)} outputs for {len(batch.queries)} queries")
        for q, target, p in zip(batch.queries, batch.query_targets, out):
            value = p.reported_score if clamped else p.predicted_score
            ids.append(batch.listener_id)
            preds.append(value)
            truth.append(target)
            if records is not None:
                records.append({
                    "sample_id": q.sample_id,
                    "listener_id": batch.listener_id,
                    "n_support": batch.n_support,
                    "predicted_score": p.predicted_score,
                    "reported_score": p.reported_score,
                    "ground_truth": target,
                })
    return build_report(ids, preds, truth, n_support, clamped, fold_index)


def evaluate(
    ckpt: Checkpoint,
    test_samples: Sequence[Sample],
    n_support: int,
    seed: int = 0,
    store: FeatureStore | None = None,
    fold_index: int = 0,
    clamped: bool = True,
    records: list | None = None,
) -> MetricsReport:
    """Fixed-episode evaluation of a checkpoint on listeners it has never seen."""
    test_samples = [s for s in test_samples if s.labeled]
    seen = set(ckpt.train_listeners) | set(ckpt.val_listeners)
    overlap = seen & {s.listener_id for s in test_samples}
    if overlap:
        raise LeakageError(f"test listeners also used for training/validation: {sorted(overlap)}")
    model = ckpt.build_model()
    if store is None:
        store = FeatureStore(make_backbone(ckpt.config.backbone, **ckpt.config.backbone_options))
    episodes = eval_episodes(test_samples, n_support, seed)
    with _determinism(ckpt.config.deterministic):
        report = _evaluate_model(model, store, episodes, n_support, clamped, fold_index, records)
    report.meta.update({"checkpoint_epoch": ckpt.epoch, "mode": ckpt.config.mode, "seed": seed})
    return report
