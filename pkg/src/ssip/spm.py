"""Support-based prediction: average support embeddings, concatenate with the
query embedding, map to a score with a linear head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .dataset import ListenerBatch, Sample
from .errors import EmptySupport, ShapeError
from .fem import ConditionInput, Embedding, FeatureExtractionModule, FeatureStore, ModelConfig

SCORE_SCALE = 100.0


@dataclass(frozen=True)
class SupportSet:
    embeddings: tuple

    def __post_init__(self):
        embs = tuple(self.embeddings)
        if not embs:
            raise EmptySupport("support set is empty")
        if len({e.listener_id for e in embs}) > 1:
            raise ValueError("support embeddings come from several listeners")
        if len({e.vector.shape for e in embs}) > 1:
            raise ShapeError("support embeddings differ in length")
        object.__setattr__(self, "embeddings", embs)


@dataclass(frozen=True)
class Prediction:
    sample_id: str
    predicted_score: float
    listener_id: str = ""
    n_support: int = 0

    @property
    def reported_score(self) -> float:
        return min(max(self.predicted_score, 0.0), 100.0)


def aggregate_support(s: SupportSet) -> np.ndarray:
    """Element-wise mean of the support embeddings, summed in sorted-id order
    so that any permutation of the set gives bit-identical output."""
    ordered = sorted(s.embeddings, key=lambda e: (e.sample_id, e.vector.tobytes()))
    return np.stack([e.vector for e in ordered]).mean(axis=0)


def predict_query(agg: np.ndarray, q: Embedding, weight: np.ndarray, bias: float,
                  scale: float = SCORE_SCALE) -> Prediction:
    """Linear head on ``[agg ; q]``; ``scale`` maps head units to percent."""
    agg = np.asarray(agg, dtype=np.float64)
    vec = np.asarray(q.vector, dtype=np.float64)
    if agg.shape != vec.shape:
        raise ShapeError(f"aggregate {agg.shape} and query {vec.shape} differ")
    x = np.concatenate([agg, vec])
    weight = np.asarray(weight, dtype=np.float64).ravel()
    if weight.shape != x.shape:
        raise ShapeError(f"head weight has {weight.size} entries, expected {x.size}")
    return Prediction(q.sample_id, float(scale * (weight @ x + bias)), q.listener_id)


class SSIPNet(nn.Module):
    """Feature extraction module plus prediction head.

    In ``ssip`` mode the head sees ``[mean support embedding ; query embedding]``.
    In ``audiogram_baseline`` mode there is no support set; the query is
    conditioned on the listener's audiogram and the head sees its embedding only.
    Head outputs are on a 0-1 scale; multiply by ``SCORE_SCALE`` for percent.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.fem = FeatureExtractionModule(cfg)
        in_dim = 2 * cfg.d2 if cfg.mode == "ssip" else cfg.d2
        self.head = nn.Linear(in_dim, 1)

    @property
    def baseline(self) -> bool:
        return self.cfg.mode == "audiogram_baseline"

    def embed_samples(self, store: FeatureStore, samples: Sequence[Sample],
                      conditions: Sequence[ConditionInput]) -> torch.Tensor:
        feats, mask = store.collate(samples)
        feats = feats.to(self.head.weight.dtype)
        return self.fem(feats, mask, self.fem.condition_tokens(conditions))

    def support_aggregate(self, store: FeatureStore, support: Sequence[Sample]) -> torch.Tensor:
        if not support:
            raise EmptySupport("support set is empty")
        ordered = sorted(support, key=lambda s: s.sample_id)
        emb = self.embed_samples(store, ordered, [ConditionInput.known(s.score) for s in ordered])
        return emb.mean(dim=0)

    def query_outputs(self, store: FeatureStore, queries: Sequence[Sample],
                      agg: torch.Tensor | None) -> torch.Tensor:
        if self.baseline:
            freqs = self.cfg.audiogram_freqs
            conds = [ConditionInput.from_audiogram(_audiogram_vector(q, freqs)) for q in queries]
            return self.head(self.embed_samples(store, queries, conds)).squeeze(-1)
        # query scores never enter the model: every query gets the sentinel
        q = self.embed_samples(store, queries, [ConditionInput.unknown()] * len(queries))
        x = torch.cat([agg.expand(q.shape[0], -1), q], dim=1)
        return self.head(x).squeeze(-1)

    def episode_outputs(self, store: FeatureStore, batch: ListenerBatch) -> torch.Tensor:
        """Head outputs (0-1 scale, unclamped) for every query of ``batch``."""
        agg = None if self.baseline else self.support_aggregate(store, batch.support)
        return self.query_outputs(store, batch.queries, agg)


def _audiogram_vector(sample: Sample, freqs) -> list[float]:
    if sample.audiogram is None:
        raise ShapeError(f"sample {sample.sample_id} has no audiogram for baseline conditioning")
    return sample.audiogram.vector(freqs).tolist()


def forward_batch(batch: ListenerBatch, model: SSIPNet, store: FeatureStore,
                  max_chunk: int = 256) -> list[Prediction]:
    """Inference on one episode: one shared support aggregate, one prediction per query."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            agg = None if model.baseline else model.support_aggregate(store, batch.support)
            outs = []
            for i in range(0, len(batch.queries), max_chunk):
                outs.append(model.query_outputs(store, batch.queries[i : i + max_chunk], agg))
            raw = torch.cat(outs).double() * SCORE_SCALE if outs else torch.empty(0)
    finally:
        model.train(was_training)
    return [
        Prediction(q.sample_id, float(v), q.listener_id, batch.n_support)
        for q, v in zip(batch.queries, raw.tolist())
    ]
