"""Manifests, listener-disjoint folds and listener-structured episode sampling."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .calibration import UNKNOWN_SCORE, Audiogram
from .errors import DuplicateId, FormatError, InsufficientSamples, UnassignedListener

MANIFEST_FIELDS = ("sample_id", "listener_id", "system_id", "audio_path", "score")


@dataclass(frozen=True)
class Sample:
    sample_id: str
    listener_id: str
    system_id: str
    audio_path: str
    score: float = UNKNOWN_SCORE
    audiogram: Audiogram | None = None
    level: float | None = None
    raw_score: float | None = None
    fold_tags: frozenset = frozenset()

    @property
    def labeled(self) -> bool:
        return self.score != UNKNOWN_SCORE

    def to_json(self) -> dict:
        rec = {
            "sample_id": self.sample_id,
            "listener_id": self.listener_id,
            "system_id": self.system_id,
            "audio_path": self.audio_path,
            "score": self.score,
            "audiogram": self.audiogram.to_json() if self.audiogram else None,
            "level": self.level,
        }
        if self.raw_score is not None:
            rec["raw_score"] = self.raw_score
        if self.fold_tags:
            rec["fold_tags"] = sorted(self.fold_tags)
        return rec


def _parse_score(value, where: str) -> float:
    if value is None:
        return UNKNOWN_SCORE
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise FormatError(f"{where}: score {value!r} is not a number") from None
    if value != UNKNOWN_SCORE and not 0.0 <= value <= 100.0:
        raise FormatError(f"{where}: score {value} outside [0, 100]")
    return value


def sample_from_record(rec: dict, base_dir: str | None = None, where: str = "record") -> Sample:
    missing = [k for k in MANIFEST_FIELDS if k not in rec]
    if missing:
        raise FormatError(f"{where}: missing fields {missing}")
    audio_path = str(rec["audio_path"])
    if base_dir and not os.path.isabs(audio_path):
        audio_path = os.path.normpath(os.path.join(base_dir, audio_path))
    audiogram = None
    if rec.get("audiogram") is not None:
        try:
            audiogram = Audiogram(rec["audiogram"])
        except (ValueError, TypeError) as exc:
            raise FormatError(f"{where}: bad audiogram: {exc}") from exc
    level = rec.get("level")
    if level is not None:
        level = float(level)
        if not math.isfinite(level):
            raise FormatError(f"{where}: non-finite level")
    raw = rec.get("raw_score")
    return Sample(
        sample_id=str(rec["sample_id"]),
        listener_id=str(rec["listener_id"]),
        system_id=str(rec["system_id"]),
        audio_path=audio_path,
        score=_parse_score(rec["score"], where),
        audiogram=audiogram,
        level=level,
        raw_score=None if raw is None else float(raw),
        fold_tags=frozenset(rec.get("fold_tags") or ()),
    )


def load_manifest(path: str | os.PathLike) -> list[Sample]:
    """Read a JSON-lines manifest. Relative audio paths resolve against its directory."""
    path = os.fspath(path)
    base_dir = os.path.dirname(os.path.abspath(path))
    samples: list[Sample] = []
    seen: set[str] = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{where}: {exc}") from exc
            if not isinstance(rec, dict):
                raise FormatError(f"{where}: record is not an object")
            sample = sample_from_record(rec, base_dir, where)
            if sample.sample_id in seen:
                raise DuplicateId(f"{where}: duplicate sample_id {sample.sample_id!r}")
            seen.add(sample.sample_id)
            samples.append(sample)
    return samples


def save_manifest(path: str | os.PathLike, samples: Iterable[Sample], relative_to: str | None = None) -> None:
    with open(path, "w") as fh:
        for s in samples:
            rec = s.to_json()
            if relative_to is not None and os.path.isabs(s.audio_path):
                rec["audio_path"] = os.path.relpath(s.audio_path, relative_to)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def by_listener(samples: Iterable[Sample]) -> dict[str, list[Sample]]:
    groups: dict[str, list[Sample]] = {}
    for s in samples:
        groups.setdefault(s.listener_id, []).append(s)
    return {k: sorted(v, key=lambda s: s.sample_id) for k, v in sorted(groups.items())}


# -- folds ------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    fold_index: int
    train_listeners: frozenset
    val_listeners: frozenset
    test_listeners: frozenset

    def __post_init__(self):
        for name in ("train_listeners", "val_listeners", "test_listeners"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        tr, va, te = self.train_listeners, self.val_listeners, self.test_listeners
        overlap = (tr & va) | (tr & te) | (va & te)
        if overlap:
            raise ValueError(f"fold {self.fold_index}: listeners in several roles: {sorted(overlap)}")

    def role_of(self, listener_id: str) -> str | None:
        for role in ("train", "val", "test"):
            if listener_id in getattr(self, f"{role}_listeners"):
                return role
        return None

    def to_json(self) -> dict:
        return {
            "fold": self.fold_index,
            "train": sorted(self.train_listeners),
            "val": sorted(self.val_listeners),
            "test": sorted(self.test_listeners),
        }

    @classmethod
    def from_json(cls, rec: dict) -> "SplitSpec":
        try:
            return cls(int(rec["fold"]), rec["train"], rec["val"], rec["test"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"bad split record: {exc}") from exc


def make_three_folds(
    listener_ids: Iterable[str],
    n_val: int = 3,
    n_test: int = 5,
    n_train: int | None = None,
    seed: int = 0,
) -> list[SplitSpec]:
    """Three listener-disjoint train/val/test assignments.

    Listeners are shuffled once; fold k takes the k-th block of ``n_test`` as
    test and the k-th block of ``n_val`` from the remainder as validation.
    ``n_train=None`` assigns every other listener to training; an explicit
    ``n_train`` demands exactly that many.
    """
    ids = sorted(set(listener_ids))
    needed = n_val + n_test + (n_train or 0)
    if n_val < 1 or n_test < 1 or len(ids) < needed or (n_train is None and len(ids) <= n_val + n_test):
        raise InsufficientSamples(
            f"cannot form disjoint {n_train or 'rest'}/{n_val}/{n_test} folds from {len(ids)} listeners"
        )
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    folds = []
    for k in range(3):
        test = [order[(k * n_test + i) % len(order)] for i in range(n_test)]
        rest = [x for x in order if x not in test]
        val = [rest[(k * n_val + i) % len(rest)] for i in range(n_val)]
        train = [x for x in rest if x not in val]
        if n_train is not None:
            train = train[:n_train]
        folds.append(SplitSpec(k + 1, train, val, test))
    return folds


def save_splits(path: str | os.PathLike, specs: Sequence[SplitSpec]) -> None:
    Path(path).write_text(json.dumps({"folds": [s.to_json() for s in specs]}, indent=2) + "\n")


def load_splits(path: str | os.PathLike) -> list[SplitSpec]:
    try:
        data = json.loads(Path(path).read_text())
        return [SplitSpec.from_json(r) for r in data["folds"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def split_by_listener(samples: Sequence[Sample], spec: SplitSpec):
    """Partition ``samples`` into (train, val, test) by listener role."""
    out = {"train": [], "val": [], "test": []}
    for s in samples:
        role = spec.role_of(s.listener_id)
        if role is None:
            raise UnassignedListener(f"listener {s.listener_id!r} has no role in fold {spec.fold_index}")
        out[role].append(s)
    return out["train"], out["val"], out["test"]


# -- episodes ---------------------------------------------------------------


@dataclass(frozen=True)
class ListenerBatch:
    """Support pairs and queries drawn from a single listener.

    ``query_targets`` holds ground truth for scoring only; the model never
    receives it.
    """

    listener_id: str
    support: tuple
    queries: tuple
    query_targets: tuple = field(default=())

    def __post_init__(self):
        for s in self.support + self.queries:
            if s.listener_id != self.listener_id:
                raise ValueError(f"sample {s.sample_id} belongs to {s.listener_id}, not {self.listener_id}")
        for s in self.support:
            if not s.labeled:
                raise ValueError(f"support sample {s.sample_id} has no known score")
        support_ids = {s.sample_id for s in self.support}
        if any(q.sample_id in support_ids for q in self.queries):
            raise ValueError("support and query sets overlap")
        if not self.query_targets:
            object.__setattr__(self, "query_targets", tuple(q.score for q in self.queries))

    @property
    def n_support(self) -> int:
        return len(self.support)

    def with_targets(self, targets: Sequence[float]) -> "ListenerBatch":
        return replace(self, query_targets=tuple(targets))


def _check_pool(pool: Sequence[Sample]) -> str:
    if not pool:
        raise InsufficientSamples("empty sample pool")
    listeners = {s.listener_id for s in pool}
    if len(listeners) != 1:
        raise ValueError(f"pool mixes listeners {sorted(listeners)}")
    return next(iter(listeners))


def sample_training_batch(
    pool: Sequence[Sample], n_support: int, batch_size: int, rng: np.random.Generator
) -> ListenerBatch:
    """Draw ``n_support`` support pairs and ``batch_size - n_support`` queries without replacement."""
    listener = _check_pool(pool)
    if not 1 <= n_support < batch_size:
        raise ValueError(f"need 1 <= n_support < batch_size, got {n_support}, {batch_size}")
    if len(pool) < batch_size:
        raise InsufficientSamples(f"listener {listener}: {len(pool)} samples < batch size {batch_size}")
    ordered = sorted(pool, key=lambda s: s.sample_id)
    picked = rng.choice(len(ordered), size=batch_size, replace=False)
    support = tuple(ordered[i] for i in picked[:n_support])
    queries = tuple(ordered[i] for i in picked[n_support:])
    return ListenerBatch(listener, support, queries)


def fixed_eval_episode(pool: Sequence[Sample], n_support: int, seed: int) -> ListenerBatch:
    """Deterministic episode: a seed-keyed shuffle of the sorted ids picks the
    support set and every remaining sample becomes a query (in id order)."""
    listener = _check_pool(pool)
    if n_support < 1:
        raise ValueError("n_support must be >= 1")
    if len(pool) <= n_support:
        raise InsufficientSamples(f"listener {listener}: {len(pool)} samples leave no queries after {n_support} support")
    ordered = sorted(pool, key=lambda s: s.sample_id)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    chosen = set(perm[:n_support].tolist())
    support = tuple(ordered[i] for i in perm[:n_support])
    queries = tuple(s for i, s in enumerate(ordered) if i not in chosen)
    return ListenerBatch(listener, support, queries)


def eval_episodes(samples: Sequence[Sample], n_support: int, seed: int) -> list[ListenerBatch]:
    return [fixed_eval_episode(pool, n_support, seed) for pool in by_listener(samples).values()]
