"""Feature extraction: frozen backbone layers -> one embedding per (audio, condition).

Pipeline for one input:

    backbone layers (L, t, d1)
      -> per layer: project d1->d2, temporal transformer, mean over time  (L, d2)
      -> append projected condition token (score, -1 sentinel, or audiogram)  (L+1, d2)
      -> layer transformer (no positional encoding), mean over layers  (d2,)

The temporal encoder and the condition projections are shared across layers
and samples.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .calibration import UNKNOWN_SCORE
from .errors import BackboneError, DegenerateSignal, ShapeError
from .signal import Waveform, load_waveform

DEFAULT_AUDIOGRAM_FREQS = (250.0, 500.0, 1000.0, 2000.0, 3000.0, 4000.0, 6000.0, 8000.0)
BACKBONE_DIR_ENV = "SSIP_BACKBONE_DIR"


# -- backbones --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BackboneOutput:
    layer_features: np.ndarray  # (L, t, d1)

    def __post_init__(self):
        if self.layer_features.ndim != 3:
            raise ShapeError(f"expected (L, t, d1) features, got shape {self.layer_features.shape}")

    @property
    def n_layers(self) -> int:
        return self.layer_features.shape[0]

    @property
    def n_frames(self) -> int:
        return self.layer_features.shape[1]

    @property
    def width(self) -> int:
        return self.layer_features.shape[2]


class BackboneExtractor(Protocol):
    n_layers: int
    width: int
    sample_rate: int

    def __call__(self, samples: np.ndarray) -> np.ndarray:
        """(n,) float samples -> (L, t, d1) float32 features."""

    def min_samples(self) -> int: ...


class ToyBackbone:
    """Seeded random convolutional stack standing in for a speech foundation model.

    Layer 1 is the log energy of ``width`` random Gabor filters over framed
    audio; each further layer is a fixed random width-3 convolution with tanh.
    Weights are drawn once from ``seed`` and never change.
    """

    def __init__(self, n_layers: int = 4, width: int = 16, sample_rate: int = 16000,
                 frame: int = 400, hop: int = 160, seed: int = 0):
        if n_layers < 1 or width < 1:
            raise ValueError("n_layers and width must be positive")
        self.n_layers = n_layers
        self.width = width
        self.sample_rate = sample_rate
        self.frame = frame
        self.hop = hop
        self.seed = seed

        rng = np.random.default_rng(seed)
        t = np.arange(frame) / sample_rate
        freqs = np.exp(rng.uniform(np.log(100.0), np.log(0.4 * sample_rate), size=width))
        phase = rng.uniform(0, 2 * np.pi, size=width)
        window = np.hanning(frame)
        self.filters = window * np.cos(2 * np.pi * freqs[:, None] * t + phase[:, None])
        self.filters /= np.linalg.norm(self.filters, axis=1, keepdims=True)
        self.convs = [
            rng.normal(0.0, 1.0 / math.sqrt(3 * width), size=(3 * width, width))
            for _ in range(n_layers - 1)
        ]

    def min_samples(self) -> int:
        return self.frame

    def __call__(self, samples: np.ndarray) -> np.ndarray:
        samples = np.asarray(samples, dtype=np.float64)
        if samples.size < self.frame:
            raise DegenerateSignal(f"audio shorter than one {self.frame}-sample frame")
        frames = np.lib.stride_tricks.sliding_window_view(samples, self.frame)[:: self.hop]
        energy = np.square(frames @ self.filters.T)
        h = np.log(energy + 1e-10) / 10.0 + 1.0
        layers = [h]
        for w in self.convs:
            padded = np.pad(h, ((1, 1), (0, 0)), mode="edge")
            stacked = np.concatenate([padded[:-2], padded[1:-1], padded[2:]], axis=1)
            h = np.tanh(stacked @ w)
            layers.append(h)
        return np.stack(layers).astype(np.float32)


class WhisperBackbone:
    """Adapter exposing all encoder-layer outputs of a frozen Whisper encoder.

    Layer outputs exclude the input embeddings, so large-v3 yields 32 layers of
    width 1280. Frames beyond the audio's actual duration (Whisper pads input
    to 30 s) are dropped.
    """

    frames_per_second = 50

    def __init__(self, model, feature_extractor, device: str = "cpu"):
        self.model = model.to(device).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.feature_extractor = feature_extractor
        self.device = device
        self.n_layers = model.config.encoder_layers
        self.width = model.config.d_model
        self.sample_rate = feature_extractor.sampling_rate

    @classmethod
    def from_pretrained(cls, path: str | None = None, device: str = "cpu") -> "WhisperBackbone":
        path = path or os.environ.get(BACKBONE_DIR_ENV)
        if not path:
            raise BackboneError(f"no backbone weights given; set {BACKBONE_DIR_ENV} or pass a path")
        try:
            from transformers import WhisperFeatureExtractor, WhisperModel

            model = WhisperModel.from_pretrained(path).get_encoder()
            fx = WhisperFeatureExtractor.from_pretrained(path)
        except (OSError, ValueError, ImportError) as exc:
            raise BackboneError(f"cannot load backbone from {path}: {exc}") from exc
        return cls(model, fx, device)

    def min_samples(self) -> int:
        return math.ceil(self.sample_rate / self.frames_per_second)

    @torch.no_grad()
    def __call__(self, samples: np.ndarray) -> np.ndarray:
        samples = np.asarray(samples, dtype=np.float32)
        if samples.size < self.min_samples():
            raise DegenerateSignal("audio shorter than one backbone frame")
        inputs = self.feature_extractor(samples, sampling_rate=self.sample_rate, return_tensors="pt")
        out = self.model(inputs.input_features.to(self.device), output_hidden_states=True)
        hidden = torch.stack(out.hidden_states[1:], dim=1)[0]  # (L, 1500, d1)
        n = min(hidden.shape[1], math.ceil(samples.size / self.sample_rate * self.frames_per_second))
        return hidden[:, :n].float().cpu().numpy()


def extract_backbone_features(backbone: BackboneExtractor, w: Waveform) -> BackboneOutput:
    if w.sample_rate != backbone.sample_rate:
        raise ValueError(f"backbone expects {backbone.sample_rate} Hz audio, got {w.sample_rate} Hz")
    feats = backbone(w.samples)
    if feats.shape[0] != backbone.n_layers or feats.shape[2] != backbone.width:
        raise BackboneError(f"backbone returned {feats.shape}, expected ({backbone.n_layers}, t, {backbone.width})")
    if feats.shape[1] == 0:
        raise DegenerateSignal("backbone produced no frames")
    return BackboneOutput(feats)


def make_backbone(kind: str, **kwargs) -> BackboneExtractor:
    if kind == "toy":
        return ToyBackbone(**kwargs)
    if kind == "foundation":
        return WhisperBackbone.from_pretrained(**kwargs)
    raise ValueError(f"unknown backbone kind {kind!r}")


class FeatureStore:
    """Caches frozen-backbone features per audio file and collates padded batches."""

    def __init__(self, backbone: BackboneExtractor, dtype: torch.dtype = torch.float32):
        self.backbone = backbone
        self.dtype = dtype
        self._cache: dict[str, torch.Tensor] = {}

    def features(self, audio_path: str) -> torch.Tensor:
        feats = self._cache.get(audio_path)
        if feats is None:
            bo = extract_backbone_features(self.backbone, load_waveform(audio_path))
            feats = torch.from_numpy(bo.layer_features).to(self.dtype)
            self._cache[audio_path] = feats
        return feats

    def put(self, audio_path: str, feats) -> None:
        """Register precomputed (L, t, d1) features for ``audio_path``."""
        self._cache[audio_path] = torch.as_tensor(feats, dtype=self.dtype)

    def collate(self, samples: Sequence) -> tuple[torch.Tensor, torch.Tensor]:
        return pad_features([self.features(s.audio_path) for s in samples])


def pad_features(items: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack (L, t_i, d1) tensors into (B, L, T, d1) plus a (B, T) padding mask (True = pad)."""
    if not items:
        raise ShapeError("cannot collate an empty batch")
    n_layers, _, width = items[0].shape
    longest = max(x.shape[1] for x in items)
    out = items[0].new_zeros((len(items), n_layers, longest, width))
    mask = torch.ones((len(items), longest), dtype=torch.bool)
    for i, x in enumerate(items):
        out[i, :, : x.shape[1]] = x
        mask[i, : x.shape[1]] = False
    return out, mask


# -- conditions ---------------------------------------------------------------


@dataclass(frozen=True)
class ConditionInput:
    kind: str  # "known_score" | "unknown_score" | "audiogram"
    score: float = UNKNOWN_SCORE
    audiogram_vector: tuple = ()

    def __post_init__(self):
        if self.kind == "known_score":
            if not 0.0 <= self.score <= 100.0:
                raise ValueError(f"known score {self.score} outside [0, 100]")
        elif self.kind == "unknown_score":
            if self.score != UNKNOWN_SCORE:
                raise ValueError("unknown_score condition must carry the -1 sentinel")
        elif self.kind == "audiogram":
            object.__setattr__(self, "audiogram_vector", tuple(float(v) for v in self.audiogram_vector))
        else:
            raise ValueError(f"unknown condition kind {self.kind!r}")

    @classmethod
    def known(cls, score: float) -> "ConditionInput":
        return cls("known_score", float(score))

    @classmethod
    def unknown(cls) -> "ConditionInput":
        return cls("unknown_score")

    @classmethod
    def from_audiogram(cls, vector) -> "ConditionInput":
        return cls("audiogram", audiogram_vector=tuple(vector))


def score_input(score: float) -> float:
    """Score fed to the projection: percent / 100, sentinel passed through as -1."""
    return UNKNOWN_SCORE if score == UNKNOWN_SCORE else score / 100.0


# -- trainable modules ----------------------------------------------------------


@dataclass
class ModelConfig:
    n_layers: int = 32
    d1: int = 1280
    d2: int = 384
    heads: int = 8
    ff_mult: int = 4
    dropout: float = 0.1
    temporal_layers: int = 1
    mode: str = "ssip"  # "ssip" | "audiogram_baseline"
    audiogram_freqs: tuple = field(default=DEFAULT_AUDIOGRAM_FREQS)

    def __post_init__(self):
        self.audiogram_freqs = tuple(float(f) for f in self.audiogram_freqs)
        if self.mode not in ("ssip", "audiogram_baseline"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.d2 % self.heads:
            raise ValueError(f"d2={self.d2} not divisible by heads={self.heads}")


def sinusoidal_positions(n: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    idx = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, idx / dim)
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(dtype)


def _encoder_layer(cfg: ModelConfig) -> nn.TransformerEncoderLayer:
    return nn.TransformerEncoderLayer(
        d_model=cfg.d2,
        nhead=cfg.heads,
        dim_feedforward=cfg.ff_mult * cfg.d2,
        dropout=cfg.dropout,
        activation="gelu",
        batch_first=True,
    )


class TemporalEncoder(nn.Module):
    """Per-layer d1->d2 projection, transformer over time, masked mean over time."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.proj = nn.Linear(cfg.d1, cfg.d2)
        self.blocks = nn.ModuleList(_encoder_layer(cfg) for _ in range(cfg.temporal_layers))

    def forward(self, feats: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        # feats (B, L, T, d1) -> (B, L, d2)
        b, n_layers, t, _ = feats.shape
        if t == 0:
            raise DegenerateSignal("no time frames")
        x = self.proj(feats.reshape(b * n_layers, t, -1))
        x = x + sinusoidal_positions(t, x.shape[-1], x.dtype)
        mask = None
        if pad_mask is not None:
            mask = pad_mask.repeat_interleave(n_layers, dim=0)
        for block in self.blocks:
            x = block(x, src_key_padding_mask=mask)
        if mask is None:
            pooled = x.mean(dim=1)
        else:
            keep = (~mask).unsqueeze(-1).to(x.dtype)
            pooled = (x * keep).sum(dim=1) / keep.sum(dim=1)
        return pooled.reshape(b, n_layers, -1)


class ConditionProjector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.score = nn.Linear(1, cfg.d2)
        self.audiogram = nn.Linear(len(cfg.audiogram_freqs), cfg.d2)

    def forward_score(self, scores: torch.Tensor) -> torch.Tensor:
        """``scores`` already mapped through :func:`score_input`, shape (B,)."""
        return self.score(scores.unsqueeze(-1))

    def forward_audiogram(self, audiograms: torch.Tensor) -> torch.Tensor:
        if audiograms.shape[-1] != self.audiogram.in_features:
            raise ShapeError(
                f"audiogram has {audiograms.shape[-1]} values, expected {self.audiogram.in_features}"
            )
        return self.audiogram(audiograms / 100.0)


class LayerFusion(nn.Module):
    """Transformer across the L+1 layer tokens, then mean over tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_tokens = cfg.n_layers + 1
        self.block = _encoder_layer(cfg)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[1] != self.n_tokens:
            raise ShapeError(f"expected {self.n_tokens} layer tokens, got {tokens.shape[1]}")
        return self.block(tokens).mean(dim=1)


class FeatureExtractionModule(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.temporal = TemporalEncoder(cfg)
        self.condition = ConditionProjector(cfg)
        self.fusion = LayerFusion(cfg)

    def forward(self, feats, pad_mask, cond_tokens) -> torch.Tensor:
        """feats (B, L, T, d1), cond_tokens (B, d2) -> embeddings (B, d2)."""
        if feats.shape[1] != self.cfg.n_layers or feats.shape[-1] != self.cfg.d1:
            raise ShapeError(
                f"features {tuple(feats.shape)} do not match L={self.cfg.n_layers}, d1={self.cfg.d1}"
            )
        layers = self.temporal(feats, pad_mask)
        return self.fusion(torch.cat([layers, cond_tokens.unsqueeze(1)], dim=1))

    def condition_tokens(self, conditions: Sequence[ConditionInput]) -> torch.Tensor:
        dtype = self.condition.score.weight.dtype
        kinds = {c.kind for c in conditions}
        if kinds <= {"known_score", "unknown_score"}:
            vals = torch.tensor([score_input(c.score) for c in conditions], dtype=dtype)
            return self.condition.forward_score(vals)
        if kinds == {"audiogram"}:
            lengths = {len(c.audiogram_vector) for c in conditions}
            if lengths != {len(self.cfg.audiogram_freqs)}:
                raise ShapeError(f"audiogram lengths {sorted(lengths)} != {len(self.cfg.audiogram_freqs)}")
            vals = torch.tensor([c.audiogram_vector for c in conditions], dtype=dtype)
            return self.condition.forward_audiogram(vals)
        raise ValueError("cannot mix score and audiogram conditions in one call")


# -- single-input functional views ------------------------------------------


@dataclass(frozen=True, eq=False)
class Embedding:
    vector: np.ndarray
    listener_id: str = ""
    sample_id: str = ""


def _as_batch(bo: BackboneOutput, dtype) -> torch.Tensor:
    return torch.as_tensor(bo.layer_features, dtype=dtype).unsqueeze(0)


@torch.no_grad()
def temporal_encode(bo: BackboneOutput, fem: FeatureExtractionModule) -> np.ndarray:
    """(L, t, d1) backbone output -> (L, d2) time-squeezed layer vectors."""
    if bo.n_frames == 0:
        raise DegenerateSignal("no time frames")
    dtype = fem.condition.score.weight.dtype
    return fem.temporal(_as_batch(bo, dtype))[0].numpy()


@torch.no_grad()
def project_condition(c: ConditionInput, fem: FeatureExtractionModule) -> np.ndarray:
    return fem.condition_tokens([c])[0].numpy()


@torch.no_grad()
def fuse_layers(layer_vectors, fem: FeatureExtractionModule, listener_id: str = "", sample_id: str = "") -> Embedding:
    dtype = fem.condition.score.weight.dtype
    tokens = torch.as_tensor(np.asarray(layer_vectors), dtype=dtype)
    if tokens.ndim != 2 or tokens.shape[1] != fem.cfg.d2:
        raise ShapeError(f"expected (L+1, {fem.cfg.d2}) layer vectors, got {tuple(tokens.shape)}")
    return Embedding(fem.fusion(tokens.unsqueeze(0))[0].numpy(), listener_id, sample_id)


def embed(w: Waveform, c: ConditionInput, backbone: BackboneExtractor, fem: FeatureExtractionModule,
          listener_id: str = "", sample_id: str = "") -> Embedding:
    bo = extract_backbone_features(backbone, w)
    layers = temporal_encode(bo, fem)
    token = project_condition(c, fem)
    return fuse_layers(np.vstack([layers, token[None]]), fem, listener_id, sample_id)


def parameter_checksum(module: nn.Module | dict) -> str:
    """SHA-256 over parameter names and raw bytes, in name order."""
    state = module.state_dict() if isinstance(module, nn.Module) else module
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()
