import hashlib

import numpy as np
import pytest
import torch

from ssip.errors import DegenerateSignal, ShapeError
from ssip.fem import (
    BackboneOutput,
    ConditionInput,
    FeatureExtractionModule,
    ModelConfig,
    ToyBackbone,
    WhisperBackbone,
    embed,
    extract_backbone_features,
    fuse_layers,
    project_condition,
    sinusoidal_positions,
    temporal_encode,
)
from ssip.signal import Waveform

from conftest import tiny_config


def _noise(seconds, fs=16000, seed=0):
    return Waveform(np.random.default_rng(seed).normal(0, 0.1, int(seconds * fs)), fs)


def _fem(cfg, seed=0):
    torch.manual_seed(seed)
    return FeatureExtractionModule(cfg).eval()


def test_toy_backbone_shapes_and_determinism():
    bb = ToyBackbone(n_layers=4, width=16)
    a = extract_backbone_features(bb, _noise(2.0))
    b = extract_backbone_features(bb, _noise(2.0))
    assert a.layer_features.shape[0] == 4 and a.width == 16
    assert a.layer_features.tobytes() == b.layer_features.tobytes()
    assert np.all(np.isfinite(a.layer_features))


def test_toy_backbone_too_short():
    with pytest.raises(DegenerateSignal):
        extract_backbone_features(ToyBackbone(), _noise(0.01))


def test_toy_backbone_rejects_wrong_rate():
    with pytest.raises(ValueError):
        extract_backbone_features(ToyBackbone(), Waveform(np.ones(8000), 8000))


def test_default_dimensions():
    fem = _fem(ModelConfig())
    bo = BackboneOutput(np.random.default_rng(0).normal(size=(32, 5, 1280)).astype(np.float32))
    layers = temporal_encode(bo, fem)
    assert layers.shape == (32, 384)
    token = project_condition(ConditionInput.unknown(), fem)
    emb = fuse_layers(np.vstack([layers, token]), fem)
    assert emb.vector.shape == (384,)
    with pytest.raises(ShapeError):
        fuse_layers(layers, fem)


def test_single_frame_pooling_is_identity():
    cfg = tiny_config()
    fem = _fem(cfg)
    x = np.random.default_rng(1).normal(size=(4, 1, 16)).astype(np.float32)
    got = temporal_encode(BackboneOutput(x), fem)
    with torch.no_grad():
        h = fem.temporal.proj(torch.from_numpy(x)) + sinusoidal_positions(1, cfg.d2)
        want = fem.temporal.blocks[0](h)[:, 0]
    np.testing.assert_allclose(got, want.numpy(), rtol=1e-5, atol=1e-6)


def test_temporal_stage_is_order_sensitive():
    fem = _fem(tiny_config())
    x = np.random.default_rng(2).normal(size=(4, 6, 16)).astype(np.float32)
    a = temporal_encode(BackboneOutput(x), fem)
    b = temporal_encode(BackboneOutput(x[:, ::-1].copy()), fem)
    assert not np.allclose(a, b)


def test_score_projection_zero_input_gives_bias():
    fem = _fem(tiny_config())
    np.testing.assert_array_equal(project_condition(ConditionInput.known(0.0), fem),
                                  fem.condition.score.bias.detach().numpy())


def test_sentinel_projection_distinct():
    fem = _fem(tiny_config())
    a = project_condition(ConditionInput.unknown(), fem)
    b = project_condition(ConditionInput.known(1.0), fem)
    assert not np.allclose(a, b)
    # sentinel enters unscaled, known scores as percent / 100
    w = fem.condition.score.weight.detach().numpy()[:, 0]
    bias = fem.condition.score.bias.detach().numpy()
    np.testing.assert_allclose(a, -1.0 * w + bias, rtol=1e-6)
    np.testing.assert_allclose(b, 0.01 * w + bias, rtol=1e-6, atol=1e-7)


def test_audiogram_projection_dot_products():
    cfg = tiny_config(mode="audiogram_baseline")
    fem = _fem(cfg)
    vec = [10, 15, 20, 30, 40, 50, 60, 65]
    got = project_condition(ConditionInput.from_audiogram(vec), fem)
    W = fem.condition.audiogram.weight.detach().numpy().astype(float)
    bias = fem.condition.audiogram.bias.detach().numpy().astype(float)
    want = [sum(W[r, c] * vec[c] / 100.0 for c in range(8)) + bias[r] for r in range(cfg.d2)]
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)
    with pytest.raises(ShapeError):
        project_condition(ConditionInput.from_audiogram(vec[:5]), fem)


def test_condition_invariants():
    with pytest.raises(ValueError):
        ConditionInput("unknown_score", 3.0)
    with pytest.raises(ValueError):
        ConditionInput.known(120.0)


def test_fusion_of_identical_tokens():
    cfg = tiny_config()
    fem = _fem(cfg)
    v = torch.randn(cfg.d2)
    with torch.no_grad():
        pooled = fem.fusion(v.expand(1, cfg.n_layers + 1, -1).clone())[0]
        single = fem.fusion.block(v.view(1, 1, -1))[0, 0]
    torch.testing.assert_close(pooled, single, rtol=1e-5, atol=1e-5)


def test_embed_shape_and_condition_effect():
    cfg = tiny_config(d2=384, heads=8)
    fem = _fem(cfg)
    bb = ToyBackbone()
    short = embed(_noise(1.0), ConditionInput.known(50.0), bb, fem)
    long = embed(_noise(10.0, seed=3), ConditionInput.known(50.0), bb, fem)
    unknown = embed(_noise(1.0), ConditionInput.unknown(), bb, fem)
    assert short.vector.shape == long.vector.shape == (384,)
    assert np.all(np.isfinite(long.vector))
    assert not np.allclose(short.vector, unknown.vector)
    again = embed(_noise(1.0), ConditionInput.known(50.0), bb, fem)
    assert again.vector.tobytes() == short.vector.tobytes()


def test_padding_does_not_change_embeddings():
    cfg = tiny_config()
    fem = _fem(cfg)
    rng = np.random.default_rng(4)
    a = torch.from_numpy(rng.normal(size=(4, 3, 16)).astype(np.float32))
    b = torch.from_numpy(rng.normal(size=(4, 7, 16)).astype(np.float32))
    from ssip.fem import pad_features

    feats, mask = pad_features([a, b])
    tokens = fem.condition_tokens([ConditionInput.unknown()] * 2)
    with torch.no_grad():
        batched = fem(feats, mask, tokens)
        alone = fem(a.unsqueeze(0), None, tokens[:1])
    torch.testing.assert_close(batched[0], alone[0], rtol=1e-5, atol=1e-5)


def _toy_checksum(bb):
    h = hashlib.sha256(bb.filters.tobytes())
    for w in bb.convs:
        h.update(w.tobytes())
    return h.hexdigest()


def test_whisper_adapter_tiny_random_model():
    transformers = pytest.importorskip("transformers")
    cfg = transformers.WhisperConfig(
        d_model=16, encoder_layers=3, encoder_attention_heads=2, decoder_layers=1,
        decoder_attention_heads=2, encoder_ffn_dim=32, decoder_ffn_dim=32, num_mel_bins=80,
        max_source_positions=1500,
    )
    torch.manual_seed(0)
    encoder = transformers.WhisperModel(cfg).get_encoder()
    fx = transformers.WhisperFeatureExtractor(feature_size=80)
    bb = WhisperBackbone(encoder, fx)
    assert all(not p.requires_grad for p in bb.model.parameters())
    bo = extract_backbone_features(bb, _noise(2.0))
    assert bo.layer_features.shape == (3, 100, 16)
    again = extract_backbone_features(bb, _noise(2.0))
    assert bo.layer_features.tobytes() == again.layer_features.tobytes()
