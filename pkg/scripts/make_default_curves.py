"""Regenerate the bundled default level-intelligibility curves.

Curves follow a logistic performance-intensity shape whose midpoint moves
one-for-one with hearing loss (a pure attenuation, as for conductive loss).
Midpoint and spread are hand-picked, not digitized from published data.
"""

import argparse
from pathlib import Path

import numpy as np

from ssip.calibration import CalibrationCurveSet, format_curves

NORMAL_MIDPOINT_DB = 22.0
SPREAD_DB = 4.5
HL_INDEX = (0, 20, 40, 60, 80)
LEVELS = np.arange(0.0, 145.0, 5.0)

COMMENT = """\
NON-AUTHORITATIVE DEFAULT. Logistic performance-intensity curves for
conductive loss: midpoint 22 dB SPL + HL, spread 4.5 dB. Replace with
digitized reference curves for serious use."""


def build() -> CalibrationCurveSet:
    curves = {}
    for hl in HL_INDEX:
        pct = 100.0 / (1.0 + np.exp(-(LEVELS - NORMAL_MIDPOINT_DB - hl) / SPREAD_DB))
        curves[hl] = (LEVELS, np.round(pct, 4))
    return CalibrationCurveSet(curves)


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--out",
        type=Path,
        default=Path(__file__).resolve().parents[1] / "src/ssip/data/default_curves.txt",
    )
    args = parser.parse_args()
    args.out.write_text(format_curves(build(), COMMENT))
    print(f"wrote {args.out}")
