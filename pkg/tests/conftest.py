"""
Shared fixtures: small feature/network configurations, synthetic clips and
corpora, and an isolated settings environment for CLI tests.
"""
from pathlib import Path
from typing import Dict, List

import numpy as np
import pytest
import torch

from app.config import get_settings
from app.features import extract_stack
from app.models import (
    AudioClip,
    Domain,
    FeatureConfig,
    FeatureStack,
    LossWeights,
    NetworkConfig,
    TrainConfig,
)
from app.synthetic import render_clip, write_fixture_corpus

SR = 22050


@pytest.fixture(autouse=True)
def single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def tone(freq: float, seconds: float = 1.0, amplitude: float = 0.5, sr: int = SR) -> AudioClip:
    t = np.arange(int(seconds * sr)) / sr
    return AudioClip(samples=amplitude * np.sin(2 * np.pi * freq * t), sample_rate=sr)


@pytest.fixture
def tone_clip() -> AudioClip:
    return tone(440.0)


@pytest.fixture(scope="session")
def feature_config() -> FeatureConfig:
    return FeatureConfig()


@pytest.fixture(scope="session")
def small_feature_config() -> FeatureConfig:
    """32 mel bands: patch height divisible by 16 and cheap to train on."""
    return FeatureConfig(n_mels=32)


@pytest.fixture(scope="session")
def small_network() -> NetworkConfig:
    return NetworkConfig(base_channels=4, n_res=1, mlp_dim=16)


@pytest.fixture(scope="session")
def small_train_config() -> TrainConfig:
    return TrainConfig(max_iters=4, seed=7, patch_frames=32, weights=LossWeights())


@pytest.fixture(scope="session")
def small_stacks(small_feature_config) -> Dict[Domain, List[FeatureStack]]:
    rng = np.random.default_rng(5)
    return {
        domain: [extract_stack(render_clip(domain, 1.0, rng), small_feature_config) for _ in range(2)]
        for domain in Domain
    }


@pytest.fixture(scope="session")
def fixture_corpus(tmp_path_factory) -> Dict[Domain, Path]:
    root = tmp_path_factory.mktemp("fixture")
    return write_fixture_corpus(root, seconds=4.0, clip_seconds=2.0, seed=3)


@pytest.fixture
def cli_env(monkeypatch, tmp_path):
    """Settings for CLI runs: 32 mel bands, private cache, plain-text logs."""
    monkeypatch.setenv("TIMBRE_N_MELS", "32")
    monkeypatch.setenv("TIMBRE_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.setenv("TIMBRE_LOG_JSON", "false")
    monkeypatch.setenv("TIMBRE_LOG_LEVEL", "WARNING")
    get_settings.cache_clear()
    yield tmp_path
    get_settings.cache_clear()
