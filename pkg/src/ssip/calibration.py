"""Level-dependent score calibration against level-intelligibility curves.

A score ``s0`` measured with audio presented at ``l0`` dB SPL is moved to
the score expected at ``l1`` by following the listener's curve:

    s1 = s0 + C_hl(l1) - C_hl(l0)

where ``hl`` is the listener's pure-tone average at 500/1000/2000 Hz and
``C_hl`` the level-intelligibility function for that hearing loss.
"""

from __future__ import annotations

import bisect
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping

import numpy as np

from .errors import FormatError, IncompleteAudiogram, InvalidCurve, UnknownScore

UNKNOWN_SCORE = -1.0
PTA_FREQUENCIES = (500.0, 1000.0, 2000.0)
CURVES_HEADER = "ssip-calibration-curves v1"


def validate_score(value: float) -> float:
    value = float(value)
    if value == UNKNOWN_SCORE or 0.0 <= value <= 100.0:
        return value
    raise ValueError(f"score {value} outside [0, 100] and not the unknown sentinel")


@dataclass(frozen=True)
class Audiogram:
    """Pure-tone hearing thresholds, frequency (Hz) -> dB HL."""

    thresholds: Mapping[float, float]

    def __post_init__(self):
        clean = {}
        for freq, level in dict(self.thresholds).items():
            freq, level = float(freq), float(level)
            if not (freq > 0 and math.isfinite(freq)):
                raise ValueError(f"invalid audiogram frequency {freq}")
            if not math.isfinite(level):
                raise ValueError(f"non-finite threshold at {freq} Hz")
            clean[freq] = level
        object.__setattr__(self, "thresholds", clean)

    def vector(self, frequencies) -> np.ndarray:
        missing = [f for f in frequencies if float(f) not in self.thresholds]
        if missing:
            raise IncompleteAudiogram(f"audiogram lacks thresholds at {missing} Hz")
        return np.array([self.thresholds[float(f)] for f in frequencies])

    def to_json(self) -> dict:
        return {_freq_key(f): v for f, v in sorted(self.thresholds.items())}


def _freq_key(freq: float) -> str:
    return str(int(freq)) if float(freq).is_integer() else repr(freq)


def average_hearing_loss(a: Audiogram) -> float:
    """Pure-tone average over 500, 1000 and 2000 Hz."""
    return float(np.mean(a.vector(PTA_FREQUENCIES)))


@dataclass(frozen=True)
class CalibrationCurveSet:
    """Level-intelligibility curves indexed by average hearing loss.

    ``curves`` maps an HL value to ``(levels, values)`` breakpoint arrays.
    Evaluation is piecewise linear along level and linear between the two
    bracketing HL curves, clamped at the tabulated edges of both axes.
    """

    curves: Mapping[float, tuple[np.ndarray, np.ndarray]]
    hl_index: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        clean = {}
        for hl, (levels, values) in self.curves.items():
            levels = np.asarray(levels, dtype=np.float64)
            values = np.asarray(values, dtype=np.float64)
            if levels.ndim != 1 or levels.shape != values.shape or levels.size < 1:
                raise InvalidCurve(f"curve HL={hl}: breakpoint arrays malformed")
            if not (np.all(np.isfinite(levels)) and np.all(np.isfinite(values))):
                raise InvalidCurve(f"curve HL={hl}: non-finite breakpoint")
            if np.any(np.diff(levels) <= 0):
                raise InvalidCurve(f"curve HL={hl}: levels must be strictly increasing")
            if np.any(np.diff(values) < 0):
                raise InvalidCurve(f"curve HL={hl}: intelligibility decreases with level")
            if values.min() < 0 or values.max() > 100:
                raise InvalidCurve(f"curve HL={hl}: values outside [0, 100]")
            levels.setflags(write=False)
            values.setflags(write=False)
            clean[float(hl)] = (levels, values)
        if len(clean) < 2:
            raise InvalidCurve("at least two hearing-loss curves are required")
        object.__setattr__(self, "curves", clean)
        object.__setattr__(self, "hl_index", tuple(sorted(clean)))

    def _at(self, hl: float, level: float) -> float:
        levels, values = self.curves[hl]
        return float(np.interp(level, levels, values))

    def max_slope(self) -> float:
        """Largest |d value / d level| over all curves."""
        return max(
            float(np.max(np.abs(np.diff(v) / np.diff(lv)))) if lv.size > 1 else 0.0
            for lv, v in self.curves.values()
        )


def curve_value(cs: CalibrationCurveSet, hl: float, level: float) -> float:
    index = cs.hl_index
    if hl <= index[0]:
        return cs._at(index[0], level)
    if hl >= index[-1]:
        return cs._at(index[-1], level)
    hi = bisect.bisect_left(index, hl)
    if index[hi] == hl:
        return cs._at(hl, level)
    lo_hl, hi_hl = index[hi - 1], index[hi]
    frac = (hl - lo_hl) / (hi_hl - lo_hl)
    lo_v, hi_v = cs._at(lo_hl, level), cs._at(hi_hl, level)
    return lo_v + frac * (hi_v - lo_v)


def calibrate_score(
    s0: float, l0: float, l1: float, hl: float, cs: CalibrationCurveSet
) -> float:
    """Score at level ``l1`` given score ``s0`` observed at level ``l0``.

    The result is clamped to [0, 100].
    """
    if s0 == UNKNOWN_SCORE:
        raise UnknownScore("cannot calibrate an unknown (-1) score")
    if l1 == l0:
        return float(s0)
    shifted = s0 + curve_value(cs, hl, l1) - curve_value(cs, hl, l0)
    return min(max(shifted, 0.0), 100.0)


def parse_curves(text: str, source: str = "<string>") -> CalibrationCurveSet:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise FormatError(f"{source}: empty curve file")
    if lines[0] != CURVES_HEADER:
        raise FormatError(f"{source}: expected header {CURVES_HEADER!r}, got {lines[0]!r}")

    rows: dict[float, list[tuple[float, float]]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{source}: row {lineno}: expected 'hl level percent'")
        try:
            hl, level, pct = (float(p) for p in parts)
        except ValueError as exc:
            raise FormatError(f"{source}: row {lineno}: {exc}") from exc
        rows.setdefault(hl, []).append((level, pct))
    if not rows:
        raise FormatError(f"{source}: no curve rows")

    curves = {}
    for hl, points in rows.items():
        arr = np.array(points)
        curves[hl] = (arr[:, 0], arr[:, 1])
    return CalibrationCurveSet(curves)


def load_curves(path: str | os.PathLike | None = None) -> CalibrationCurveSet:
    """Load a curve file; ``None`` loads the bundled default curves.

    The bundled curves are an approximation with the right qualitative shape,
    not digitized reference data.
    """
    if path is None:
        text = resources.files("ssip.data").joinpath("default_curves.txt").read_text()
        return parse_curves(text, "default_curves.txt")
    path = os.fspath(path)
    with open(path) as fh:
        return parse_curves(fh.read(), path)


def format_curves(cs: CalibrationCurveSet, comment: str | None = None) -> str:
    out = [CURVES_HEADER]
    if comment:
        out.extend(f"# {ln}" for ln in comment.splitlines())
    out.append("# hl_db  level_db_spl  intelligibility_pct")
    for hl in cs.hl_index:
        levels, values = cs.curves[hl]
        out.extend(f"{hl:g} {lv:g} {v:.4f}" for lv, v in zip(levels, values))
    return "\n".join(out) + "\n"
