import os

import hypothesis
import numpy as np
import pytest
import torch

from ssip import dataset, prepare, synth
from ssip.dataset import Sample
from ssip.fem import FeatureStore, ModelConfig, ToyBackbone

hypothesis.settings.register_profile("default", deadline=None, max_examples=100)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=10)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """31 synthetic listeners x 40 clips, prepared into a manifest with folds."""
    root = tmp_path_factory.mktemp("synth")
    truth = synth.generate(root / "raw", n_listeners=31, per_listener=40, seed=0)
    prepare.prepare(root / "raw", root / "prep")
    return root, truth


@pytest.fixture(scope="session")
def synth_samples(synth_root):
    root, _ = synth_root
    return dataset.load_manifest(root / "prep" / "manifest.jsonl")


@pytest.fixture(scope="session")
def synth_folds(synth_root):
    root, _ = synth_root
    return dataset.load_splits(root / "prep" / "splits.json")


@pytest.fixture(scope="session")
def toy_store():
    return FeatureStore(ToyBackbone())


def tiny_config(**kw):
    base = dict(n_layers=4, d1=16, d2=16, heads=2, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def fake_samples(listener, n, rng, prefix="s", labeled=True):
    out = []
    for i in range(n):
        score = float(rng.uniform(0, 100)) if labeled else -1.0
        out.append(Sample(f"{prefix}{i:03d}", listener, "E001", f"/virtual/{listener}/{prefix}{i:03d}.wav", score))
    return out


def fill_store(store, samples, rng, n_layers=4, width=16, frames=(3, 9)):
    for s in samples:
        t = int(rng.integers(frames[0], frames[1] + 1))
        store.put(s.audio_path, torch.from_numpy(rng.normal(size=(n_layers, t, width)).astype(np.float32)))
