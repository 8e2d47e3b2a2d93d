"""Audio I/O and RMS presentation-level handling."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .errors import DegenerateSignal, FormatError

DEFAULT_TARGET_SPL = 65.0


@dataclass(frozen=True)
class LevelReference:
    """Maps digital full scale to sound pressure level.

    A waveform whose RMS amplitude is 1.0 is taken to be presented at
    ``spl_at_full_scale_rms`` dB SPL.
    """

    spl_at_full_scale_rms: float = 100.0

    def __post_init__(self):
        if not math.isfinite(self.spl_at_full_scale_rms):
            raise ValueError("spl_at_full_scale_rms must be finite")


DEFAULT_REFERENCE = LevelReference()


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("Waveform samples must be one-dimensional (mono)")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def _rms(samples: np.ndarray) -> float:
    if samples.size == 0:
        raise DegenerateSignal("empty waveform has no level")
    rms = float(np.sqrt(np.mean(np.square(samples))))
    if rms == 0.0:
        raise DegenerateSignal("all-zero waveform has no level")
    return rms


def rms_level_db(w: Waveform, ref: LevelReference = DEFAULT_REFERENCE) -> float:
    """Presentation level of ``w`` in dB SPL under ``ref``."""
    return ref.spl_at_full_scale_rms + 20.0 * math.log10(_rms(w.samples))


def normalize_to_spl(
    w: Waveform,
    target: float = DEFAULT_TARGET_SPL,
    ref: LevelReference = DEFAULT_REFERENCE,
) -> Waveform:
    """Scale ``w`` so that its RMS level equals ``target`` dB SPL.

    No clipping is applied; samples may leave [-1, 1].
    """
    gain = 10.0 ** ((target - rms_level_db(w, ref)) / 20.0)
    if gain == 1.0:
        return w
    return Waveform(w.samples * gain, w.sample_rate)


def load_waveform(path: str | os.PathLike) -> Waveform:
    """Read a WAV file as a full-scale mono waveform.

    Integer PCM is divided by its full-scale magnitude (so int16 32767
    becomes 32767/32768). Multichannel files are averaged to mono.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample type {data.dtype}")

    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return Waveform(samples, int(rate))


def save_waveform(path: str | os.PathLike, w: Waveform) -> None:
    """Write ``w`` as 32-bit float WAV (unclipped)."""
    wavfile.write(os.fspath(path), w.sample_rate, w.samples.astype(np.float32))
