"""Conversion of CPC-style metadata into a level-normalized, calibrated manifest.

Expected input layout::

    <cpc_dir>/listeners.json        {id: {audiogram_cfs, audiogram_levels_l, audiogram_levels_r}}
    <cpc_dir>/metadata/*.json       [{signal, listener, system, correctness}, ...]
    <audio_dir>/**/<signal>.wav     (audio_dir defaults to <cpc_dir>/audio)

Output layout::

    <out>/manifest.jsonl  <out>/audio/<signal>.wav  <out>/splits.json  <out>/prepare_info.json
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibration import (
    Audiogram,
    CalibrationCurveSet,
    average_hearing_loss,
    calibrate_score,
    format_curves,
    load_curves,
)
from .dataset import Sample, make_three_folds, save_manifest, save_splits
from .errors import DuplicateId, FormatError, IncompleteAudiogram
from .signal import (
    DEFAULT_REFERENCE,
    DEFAULT_TARGET_SPL,
    LevelReference,
    load_waveform,
    normalize_to_spl,
    rms_level_db,
    save_waveform,
)


def _listener_audiograms(path: Path) -> dict[str, Audiogram | str]:
    """Audiogram per listener, or a problem description raised later with the record id."""
    data = json.loads(path.read_text())
    out: dict[str, Audiogram | str] = {}
    for lid, rec in data.items():
        try:
            cfs = rec["audiogram_cfs"]
            left = np.asarray(rec["audiogram_levels_l"], dtype=float)
            right = np.asarray(rec["audiogram_levels_r"], dtype=float)
        except KeyError as exc:
            out[lid] = f"listener {lid}: missing field {exc}"
            continue
        if not (len(cfs) == len(left) == len(right)):
            out[lid] = f"listener {lid}: audiogram arrays differ in length"
            continue
        # ears averaged into one audiogram
        out[lid] = Audiogram(dict(zip(cfs, (left + right) / 2.0)))
    return out


def _score_records(meta_dir: Path) -> list[dict]:
    files = sorted(meta_dir.glob("*.json"))
    if not files:
        raise FormatError(f"no score metadata in {meta_dir}")
    by_signal: dict[str, dict] = {}
    for f in files:
        for rec in json.loads(f.read_text()):
            key = rec.get("signal")
            if key is None:
                raise FormatError(f"{f}: record without 'signal'")
            prev = by_signal.get(key)
            if prev is not None and prev != rec:
                raise DuplicateId(f"{f}: conflicting records for signal {key}")
            by_signal[key] = rec
    return [by_signal[k] for k in sorted(by_signal)]


def _audio_index(audio_dir: Path) -> dict[str, Path]:
    index = {}
    for root, _, names in os.walk(audio_dir):
        for name in names:
            if name.endswith(".wav"):
                index.setdefault(name[:-4], Path(root) / name)
    return index


def prepare(
    cpc_dir: str | os.PathLike,
    out_dir: str | os.PathLike,
    curves: CalibrationCurveSet | None = None,
    audio_dir: str | os.PathLike | None = None,
    target_spl: float = DEFAULT_TARGET_SPL,
    ref: LevelReference = DEFAULT_REFERENCE,
    n_val: int = 3,
    n_test: int = 5,
    n_train: int | None = None,
    split_seed: int = 0,
) -> list[Sample]:
    """Normalize every clip to ``target_spl``, calibrate its score to that level,
    and write the manifest plus three listener-disjoint folds."""
    cpc_dir, out = Path(cpc_dir), Path(out_dir)
    curves = curves or load_curves()
    audiograms = _listener_audiograms(cpc_dir / "listeners.json")
    records = _score_records(cpc_dir / "metadata")
    index = _audio_index(Path(audio_dir) if audio_dir else cpc_dir / "audio")
    (out / "audio").mkdir(parents=True, exist_ok=True)

    samples = []
    for rec in records:
        signal = rec["signal"]
        missing = [k for k in ("listener", "system", "correctness") if k not in rec]
        if missing:
            raise FormatError(f"record {signal}: missing {missing}")
        audiogram = audiograms.get(rec["listener"])
        if audiogram is None:
            raise IncompleteAudiogram(f"record {signal}: no audiogram for listener {rec['listener']}")
        if isinstance(audiogram, str):
            raise IncompleteAudiogram(f"record {signal}: {audiogram}")
        try:
            hl = average_hearing_loss(audiogram)
        except IncompleteAudiogram as exc:
            raise IncompleteAudiogram(f"record {signal}: {exc}") from None
        if signal not in index:
            raise FileNotFoundError(f"record {signal}: no audio file found")

        wav = load_waveform(index[signal])
        level = rms_level_db(wav, ref)
        dest = out / "audio" / f"{signal}.wav"
        save_waveform(dest, normalize_to_spl(wav, target_spl, ref))
        raw = float(rec["correctness"])
        samples.append(Sample(
            sample_id=signal,
            listener_id=str(rec["listener"]),
            system_id=str(rec["system"]),
            audio_path=str(dest.resolve()),
            score=calibrate_score(raw, level, target_spl, hl, curves),
            audiogram=audiogram,
            level=level,
            raw_score=raw,
        ))

    save_manifest(out / "manifest.jsonl", samples, relative_to=str(out.resolve()))
    listeners = sorted({s.listener_id for s in samples})
    save_splits(out / "splits.json", make_three_folds(listeners, n_val, n_test, n_train, split_seed))
    curves_text = format_curves(curves)
    info = {
        "n_records": len(samples),
        "n_listeners": len(listeners),
        "target_spl": target_spl,
        "spl_at_full_scale_rms": ref.spl_at_full_scale_rms,
        "curves_sha256": hashlib.sha256(curves_text.encode()).hexdigest(),
    }
    (out / "prepare_info.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return samples


def calibrate_samples(
    samples: Sequence[Sample],
    curves: CalibrationCurveSet,
    target_spl: float = DEFAULT_TARGET_SPL,
) -> list[Sample]:
    """Move each labeled score from its recorded level to ``target_spl``.

    The original score (``raw_score`` if present, else ``score``) is kept in
    ``raw_score``; unlabeled samples pass through unchanged.
    """
    out = []
    for s in samples:
        if not s.labeled:
            out.append(s)
            continue
        if s.level is None:
            raise FormatError(f"sample {s.sample_id}: no level recorded")
        if s.audiogram is None:
            raise IncompleteAudiogram(f"sample {s.sample_id}: no audiogram")
        raw = s.raw_score if s.raw_score is not None else s.score
        hl = average_hearing_loss(s.audiogram)
        out.append(replace(s, score=calibrate_score(raw, s.level, target_spl, hl, curves), raw_score=raw))
    return out
