import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from ssip.dataset import eval_episodes
from ssip.errors import FormatError, InsufficientSamples, LeakageError, RangeError
from ssip.fem import FeatureStore, ToyBackbone
from ssip.spm import Prediction
from ssip.training import (
    Checkpoint,
    TrainConfig,
    _evaluate_model,
    evaluate,
    evaluate_predictor,
    huber_loss,
    lr_at,
    train,
)

from conftest import fake_samples, fill_store, tiny_config


def test_huber_examples():
    assert huber_loss(0.5, 0.0) == pytest.approx(0.125)
    assert huber_loss(0.0, 2.0) == pytest.approx(1.5)
    assert huber_loss(3.0, 3.0) == 0.0
    with pytest.raises(ValueError):
        huber_loss(1.0, 0.0, delta=0.0)


def test_huber_matches_torch():
    for e in np.linspace(-3, 3, 25):
        want = torch.nn.functional.huber_loss(torch.tensor(e, dtype=torch.float64), torch.tensor(0.0, dtype=torch.float64))
        assert huber_loss(float(e), 0.0) == pytest.approx(float(want))


def test_lr_schedule_points():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == pytest.approx(3e-6)
    assert lr_at(10, cfg) == pytest.approx(3e-5)
    assert lr_at(105, cfg) == pytest.approx(1.5e-5)
    assert lr_at(199, cfg) > 0
    with pytest.raises(RangeError):
        lr_at(200, cfg)
    with pytest.raises(RangeError):
        lr_at(-1, cfg)


def test_lr_schedule_continuous_and_bounded():
    cfg = TrainConfig()
    values = [lr_at(e, cfg) for e in range(cfg.epochs)]
    assert max(values) == pytest.approx(cfg.learning_rate)
    steps = np.abs(np.diff(values))
    assert steps.max() <= cfg.learning_rate * 0.09 + 1e-15
    assert all(b >= a for a, b in zip(values[:10], values[1:11]))
    assert all(b <= a for a, b in zip(values[10:], values[11:]))


def test_config_json_roundtrip_and_validation(tmp_path):
    cfg = TrainConfig.toy(epochs=7, model={"d2": 8, "heads": 2})
    again = TrainConfig.from_json(cfg.to_json())
    assert again.to_json() == cfg.to_json()
    with pytest.raises(FormatError):
        TrainConfig.from_json({"epochz": 3})
    with pytest.raises(ValueError):
        TrainConfig(n_support=128, batch_size=128)
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(FormatError):
        TrainConfig.load(p)


def _data(n_listeners=3, per=12, seed=0, prefix="L"):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_listeners):
        samples += fake_samples(f"{prefix}{i}", per, rng, prefix=f"{prefix}{i}_")
    store = FeatureStore(None)
    fill_store(store, samples, rng)
    return samples, store


def _cfg(**kw):
    base = dict(epochs=6, learning_rate=3e-3, warmup_epochs=1, batch_size=6, n_support=2,
                backbone="toy", model=tiny_config(), steps_per_epoch=4)
    base.update(kw)
    return TrainConfig(**base)


def test_training_reduces_loss():
    samples, store = _data()
    ckpt = train(_cfg(epochs=30), samples, store=store)
    losses = [h["train_loss"] for h in ckpt.history]
    assert np.mean(losses[-5:]) < losses[0]


def test_memorizes_small_set():
    rng = np.random.default_rng(3)
    samples = fake_samples("L0", 8, rng)
    store = FeatureStore(None)
    fill_store(store, samples, rng)
    cfg = _cfg(epochs=200, warmup_epochs=5, batch_size=8, n_support=2, steps_per_epoch=2)
    ckpt = train(cfg, samples, store=store)
    eps = eval_episodes(samples, 2, seed=0)
    report = _evaluate_model(ckpt.build_model(), store, eps, 2)
    assert report.rmse < 5.0


def test_training_is_deterministic():
    samples, store = _data()
    a = train(_cfg(), samples, store=store)
    b = train(_cfg(), samples, store=store)
    assert a.checksum() == b.checksum()
    assert a.history == b.history
    c = train(_cfg(seed=1), samples, store=store)
    assert c.checksum() != a.checksum()


def test_best_validation_checkpoint_selected(tmp_path):
    samples, store = _data()
    val, _ = _data(n_listeners=2, seed=5, prefix="V")
    fill_store(store, val, np.random.default_rng(5))
    log_path = tmp_path / "log.jsonl"
    ckpt = train(_cfg(epochs=8), samples, val, store=store, log_path=log_path)
    vals = [h["val_rmse"] for h in ckpt.history]
    assert ckpt.epoch == int(np.argmin(vals))
    assert ckpt.val_metrics["rmse"] == min(vals)
    assert len(log_path.read_text().splitlines()) == 8


def test_train_rejects_leakage_and_small_pools():
    samples, store = _data()
    with pytest.raises(LeakageError):
        train(_cfg(), samples, samples[:5], store=store)
    with pytest.raises(InsufficientSamples):
        train(_cfg(n_support=2), samples[:2], store=store)


def test_small_listeners_train_with_fewer_queries():
    samples, store = _data(per=5)
    ckpt = train(_cfg(batch_size=16, n_support=2, epochs=2), samples, store=store)
    assert len(ckpt.history) == 2


def test_baseline_mode_trains():
    from ssip.calibration import Audiogram

    samples, store = _data()
    ag = Audiogram({f: 20.0 for f in tiny_config().audiogram_freqs})
    samples = [replace(s, audiogram=ag) for s in samples]
    ckpt = train(_cfg(model=tiny_config(mode="audiogram_baseline")), samples, store=store)
    assert ckpt.config.mode == "audiogram_baseline"


def test_checkpoint_roundtrip(tmp_path):
    samples, store = _data()
    ckpt = train(_cfg(epochs=2), samples, store=store, curves_hash="abc")
    path = tmp_path / "ckpt.pt"
    ckpt.save(path)
    back = Checkpoint.load(path)
    assert back.checksum() == ckpt.checksum()
    assert back.config.to_json() == ckpt.config.to_json()
    assert back.train_listeners == ckpt.train_listeners and back.curves_hash == "abc"
    torch.save({"format": "other"}, tmp_path / "x.pt")
    with pytest.raises(FormatError):
        Checkpoint.load(tmp_path / "x.pt")


def test_frozen_backbone_unchanged_by_training():
    import hashlib

    bb = ToyBackbone()

    def digest():
        h = hashlib.sha256(bb.filters.tobytes())
        for w in bb.convs:
            h.update(w.tobytes())
        return h.hexdigest()

    before = digest()
    store = FeatureStore(bb)
    samples, _ = _data(n_listeners=2, per=6)
    import tempfile
    from ssip.signal import Waveform, save_waveform

    tmp = tempfile.mkdtemp()
    rng = np.random.default_rng(0)
    real = []
    for s in samples:
        path = f"{tmp}/{s.sample_id}.wav"
        save_waveform(path, Waveform(rng.normal(0, 0.1, 4000), 16000))
        real.append(replace(s, audio_path=path))
    train(_cfg(epochs=2, model=tiny_config()), real, store=store)
    assert digest() == before


class _Oracle:
    def __call__(self, batch):
        return [Prediction(q.sample_id, t) for q, t in zip(batch.queries, batch.query_targets)]


def test_evaluate_with_stub_predictors():
    rng = np.random.default_rng(0)
    samples = fake_samples("L0", 10, rng) + fake_samples("L1", 10, rng, prefix="t")
    eps = eval_episodes(samples, 3, seed=0)
    perfect = evaluate_predictor(_Oracle(), eps, 3)
    assert perfect.rmse == 0.0 and perfect.ncc == pytest.approx(1.0)
    assert perfect.n_queries == 14

    def constant(batch):
        return [Prediction(q.sample_id, 50.0) for q in batch.queries]

    flat = evaluate_predictor(constant, eps, 3)
    assert math.isnan(flat.ncc) and not flat.ncc_defined
    truth = [t for b in eps for t in b.query_targets]
    assert flat.rmse == pytest.approx(math.sqrt(np.mean((np.array(truth) - 50.0) ** 2)))


def test_clamping_flag():
    rng = np.random.default_rng(0)
    samples = fake_samples("L0", 6, rng)
    eps = eval_episodes(samples, 2, seed=0)

    def high(batch):
        return [Prediction(q.sample_id, 150.0) for q in batch.queries]

    rec = []
    clamped = evaluate_predictor(high, eps, 2, clamped=True, records=rec)
    raw = evaluate_predictor(high, eps, 2, clamped=False)
    assert raw.rmse > clamped.rmse
    assert all(r["reported_score"] == 100.0 and r["predicted_score"] == 150.0 for r in rec)


def test_evaluate_rejects_seen_listeners():
    samples, store = _data()
    ckpt = train(_cfg(epochs=1, warmup_epochs=0), samples, store=store)
    with pytest.raises(LeakageError):
        evaluate(ckpt, samples, 2, store=store)
    test, _ = _data(n_listeners=2, seed=9, prefix="T")
    fill_store(store, test, np.random.default_rng(9))
    rep = evaluate(ckpt, test, 2, store=store)
    again = evaluate(ckpt, test, 2, store=store)
    assert rep.rmse == again.rmse and rep.n_queries == 20
