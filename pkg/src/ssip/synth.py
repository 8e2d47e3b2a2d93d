"""Deterministic synthetic listening-test data in a CPC-like layout.

Each clip is a tone plus white noise. Its tone frequency encodes a statistic
``s`` in [0, 1] (300 Hz at 0 up to 3 kHz at 1, log spaced). Every listener
has a private affine rule ``score = slope * s + offset`` giving the score the
listener would achieve at 65 dB SPL. Clips are stored at a listener-dependent
presentation level, and the stored raw score is moved along the calibration
curve to that level. Calibrating back to 65 dB therefore recovers the affine
rule, except where the raw score had to be clipped to [0, 100].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calibration import Audiogram, CalibrationCurveSet, average_hearing_loss, curve_value, load_curves
from .fem import DEFAULT_AUDIOGRAM_FREQS
from .signal import DEFAULT_REFERENCE, DEFAULT_TARGET_SPL, LevelReference, Waveform, normalize_to_spl, save_waveform

N_SYSTEMS = 6


@dataclass(frozen=True)
class SynthListener:
    listener_id: str
    audiogram: Audiogram
    slope: float
    offset: float

    def score(self, stat: float) -> float:
        return self.slope * stat + self.offset


def tone_frequency(stat: float) -> float:
    return 300.0 * 10.0 ** stat


def make_listeners(n: int, rng: np.random.Generator) -> list[SynthListener]:
    listeners = []
    octaves = np.log2(np.array(DEFAULT_AUDIOGRAM_FREQS) / 250.0)
    for i in range(n):
        base = rng.uniform(5.0, 55.0)
        tilt = rng.uniform(2.0, 10.0)
        thresholds = base + tilt * octaves + rng.normal(0.0, 3.0, size=octaves.size)
        audiogram = Audiogram(dict(zip(DEFAULT_AUDIOGRAM_FREQS, np.round(thresholds, 1))))
        hl = average_hearing_loss(audiogram)
        # loosely tied to hearing loss so the audiogram is informative but incomplete
        offset = float(np.clip(70.0 - 0.6 * hl + rng.normal(0.0, 10.0), 5.0, 60.0))
        slope = rng.uniform(25.0, 40.0)
        listeners.append(SynthListener(f"L{i + 1:04d}", audiogram, slope, offset))
    return listeners


def make_clip(stat: float, duration: float, sample_rate: int, rng: np.random.Generator,
              snr_db: float = 15.0) -> np.ndarray:
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    tone = np.sin(2 * np.pi * tone_frequency(stat) * t + rng.uniform(0, 2 * np.pi))
    noise = rng.normal(0.0, 1.0, size=t.size)
    noise *= np.sqrt(np.mean(tone**2) / np.mean(noise**2)) * 10 ** (-snr_db / 20)
    return tone + noise


def generate(
    out_dir: str | Path,
    n_listeners: int = 31,
    per_listener: int = 40,
    duration: float = 0.4,
    sample_rate: int = 16000,
    seed: int = 0,
    curves: CalibrationCurveSet | None = None,
    ref: LevelReference = DEFAULT_REFERENCE,
) -> dict:
    """Write ``listeners.json``, ``metadata/scores.json`` and ``audio/*.wav`` under ``out_dir``.

    Returns a summary including each clip's statistic and 65 dB target score,
    which tests use as ground truth.
    """
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "metadata").mkdir(exist_ok=True)
    curves = curves or load_curves()
    rng = np.random.default_rng(seed)
    listeners = make_listeners(n_listeners, rng)

    records, truth = [], {}
    for lst in listeners:
        hl = average_hearing_loss(lst.audiogram)
        for j in range(per_listener):
            stat = float(rng.uniform(0.0, 1.0))
            system = f"E{rng.integers(N_SYSTEMS) + 1:03d}"
            signal = f"S{j + 1:05d}_{lst.listener_id}_{system}"
            level = float(60.0 + 0.25 * hl + rng.normal(0.0, 3.0))
            clip = normalize_to_spl(Waveform(make_clip(stat, duration, sample_rate, rng), sample_rate), level, ref)
            save_waveform(out / "audio" / f"{signal}.wav", clip)

            target = lst.score(stat)
            raw = target - curve_value(curves, hl, DEFAULT_TARGET_SPL) + curve_value(curves, hl, level)
            records.append({
                "signal": signal,
                "listener": lst.listener_id,
                "system": system,
                "correctness": float(np.clip(raw, 0.0, 100.0)),
            })
            truth[signal] = {"stat": stat, "target": target, "level": level}

    listener_json = {
        lst.listener_id: {
            "name": lst.listener_id,
            "audiogram_cfs": [int(f) for f in DEFAULT_AUDIOGRAM_FREQS],
            "audiogram_levels_l": [lst.audiogram.thresholds[f] for f in DEFAULT_AUDIOGRAM_FREQS],
            "audiogram_levels_r": [lst.audiogram.thresholds[f] for f in DEFAULT_AUDIOGRAM_FREQS],
        }
        for lst in listeners
    }
    (out / "listeners.json").write_text(json.dumps(listener_json, indent=1, sort_keys=True) + "\n")
    (out / "metadata" / "scores.json").write_text(json.dumps(records, indent=1) + "\n")
    summary = {
        "seed": seed,
        "n_listeners": n_listeners,
        "per_listener": per_listener,
        "listeners": {
            lst.listener_id: {"slope": lst.slope, "offset": lst.offset} for lst in listeners
        },
        "clips": truth,
    }
    (out / "synth_truth.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary
