"""
Shared fixtures: audio buffers and a small generated corpus
"""

import numpy as np
import pytest

from src.frontend import AudioBuffer
from src.synth import SynthConfig, write_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def noise_audio(rng):
    """One second of white noise at 16 kHz"""
    return AudioBuffer(rng.standard_normal(16000) * 0.1, 16000, "noise")


@pytest.fixture
def silence_audio():
    return AudioBuffer(np.zeros(16000), 16000, "silence")


SMALL_CORPUS = SynthConfig(
    recordings=6,
    speakers_per_recording=2,
    speaker_pool=4,
    duration=16.0,
    sample_rate=8000,
    min_turn=1.5,
    max_turn=3.0,
    min_gap=0.3,
    max_gap=0.8,
    train_fraction=0.5,
)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Generated 6-recording corpus shared by the end-to-end tests; treat as read-only"""
    out = tmp_path_factory.mktemp("corpus")
    write_corpus(out, SMALL_CORPUS, seed=7)
    return out
