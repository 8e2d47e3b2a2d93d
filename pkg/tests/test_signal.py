import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.io import wavfile

from ssip.errors import DegenerateSignal, FormatError
from ssip.signal import LevelReference, Waveform, load_waveform, normalize_to_spl, rms_level_db

REF = LevelReference(100.0)


def direct_rms(xs):
    total = 0.0
    for x in xs:
        total += x * x
    return math.sqrt(total / len(xs))


def test_constant_full_scale_is_reference_level():
    assert rms_level_db(Waveform(np.ones(100), 16000), REF) == 100.0


def test_unit_sine_level():
    fs, f0 = 16000, 100.0
    n = int(fs / f0) * 20  # 20 whole periods
    x = np.sin(2 * np.pi * f0 * np.arange(n) / fs)
    expected = 100.0 + 20 * math.log10(direct_rms(x.tolist()))
    assert expected == pytest.approx(96.9897, abs=0.01)
    assert rms_level_db(Waveform(x, fs), REF) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("samples", [np.zeros(64), np.array([])])
def test_degenerate_signals(samples):
    with pytest.raises(DegenerateSignal):
        rms_level_db(Waveform(samples, 16000), REF)


def test_normalize_identity_at_target():
    x = np.random.default_rng(0).normal(size=1000)
    w = normalize_to_spl(Waveform(x, 8000), 65.0, REF)
    again = normalize_to_spl(w, 65.0, REF)
    np.testing.assert_allclose(again.samples, w.samples, rtol=1e-12)


def test_normalize_halves_amplitude():
    # constant signal of amplitude a sits at 100 + 20 log10(a) dB
    a = 10 ** ((71.0206 - 100.0) / 20)
    w = Waveform(np.full(50, a), 16000)
    out = normalize_to_spl(w, 65.0, REF)
    scale = direct_rms(out.samples.tolist()) / direct_rms(w.samples.tolist())
    assert scale == pytest.approx(0.5, abs=1e-5)
    np.testing.assert_allclose(out.samples / w.samples, scale)


def test_normalize_gains_twenty_db():
    x = np.random.default_rng(1).normal(size=400)
    w = normalize_to_spl(Waveform(x, 16000), 45.0, REF)
    out = normalize_to_spl(w, 65.0, REF)
    assert direct_rms(out.samples.tolist()) / direct_rms(w.samples.tolist()) == pytest.approx(10.0, rel=1e-9)
    assert out.sample_rate == w.sample_rate


def test_normalize_does_not_clip():
    w = Waveform(np.array([0.5, -0.5, 0.25]), 16000)
    out = normalize_to_spl(w, 110.0, REF)
    assert np.abs(out.samples).max() > 1.0


signals = st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=200).filter(
    lambda xs: any(abs(x) > 1e-3 for x in xs)
)


@given(signals, st.floats(0.01, 100.0))
def test_scale_covariance(xs, k):
    w = Waveform(np.array(xs), 16000)
    scaled = Waveform(np.array(xs) * k, 16000)
    assert rms_level_db(scaled, REF) == pytest.approx(rms_level_db(w, REF) + 20 * math.log10(k), abs=1e-9)


@given(signals, st.floats(20.0, 110.0))
def test_normalize_properties(xs, target):
    w = Waveform(np.array(xs), 16000)
    out = normalize_to_spl(w, target, REF)
    assert rms_level_db(out, REF) == pytest.approx(target, abs=1e-6)
    assert len(out) == len(w)
    np.testing.assert_array_equal(np.sign(out.samples), np.sign(w.samples))
    twice = normalize_to_spl(out, target, REF)
    np.testing.assert_allclose(twice.samples, out.samples, rtol=0, atol=1e-9)


def test_load_int16_full_scale(tmp_path):
    data = np.zeros(10, dtype=np.int16)
    data[3] = 32767
    data[5] = -32768
    wavfile.write(tmp_path / "a.wav", 16000, data)
    w = load_waveform(tmp_path / "a.wav")
    assert w.sample_rate == 16000
    assert w.samples[3] == 32767 / 32768
    assert w.samples[5] == -1.0


def test_load_float(tmp_path):
    data = np.linspace(-0.5, 0.5, 11).astype(np.float32)
    wavfile.write(tmp_path / "f.wav", 8000, data)
    np.testing.assert_allclose(load_waveform(tmp_path / "f.wav").samples, data)


def test_stereo_antiphase_averages_to_silence(tmp_path):
    x = (np.random.default_rng(2).normal(size=100) * 1000).astype(np.int16)
    wavfile.write(tmp_path / "s.wav", 16000, np.stack([x, -x], axis=1))
    w = load_waveform(tmp_path / "s.wav")
    assert np.all(w.samples == 0.0)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_waveform(tmp_path / "nope.wav")


def test_unsupported_format(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"definitely not a riff file")
    with pytest.raises(FormatError):
        load_waveform(tmp_path / "bad.wav")
