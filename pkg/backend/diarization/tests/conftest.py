import json
import logging

import numpy as np
import pytest

from diarization.core import ScaleConfig
from diarization.synthembed import gen_session

from .factories import ScaleConfigFactory, SynthConfigFactory


@pytest.fixture(autouse=True)
def propagate_package_logs(monkeypatch):
    """The package logger does not propagate outside tests; let caplog see it"""
    monkeypatch.setattr(logging.getLogger('diarization'), 'propagate', True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def telephonic_scales():
    return ScaleConfig.from_windows([1.5, 1.25, 1.0, 0.75, 0.5])


@pytest.fixture
def small_scales():
    return ScaleConfigFactory()


@pytest.fixture
def two_speaker_session(small_scales):
    return gen_session(SynthConfigFactory(seed=21), small_scales, session_id='two-speakers')


@pytest.fixture
def small_config_file(tmp_path):
    """Run config for fast command tests: two scales, short low-dimensional sessions, a tiny decoder"""
    path = tmp_path / 'small.json'
    path.write_text(json.dumps({
        'scales': {'windows': [1.0, 0.5]},
        'synth': {'num_sessions': 3, 'dim': 16, 'session_duration': 12.0, 'seed': 5},
        'msdd': {'conv_channels': 2, 'fc_hidden': 8, 'lstm_hidden': 4, 'lstm_layers': 1},
        'training': {'max_epochs': 2, 'patience': 1, 'batch_size': 8, 'seed': 3},
    }))
    return path
