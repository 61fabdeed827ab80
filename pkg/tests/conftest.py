import numpy as np
import pytest

from listennet.model import ModelConfig, init_params
from listennet.synthetic import SyntheticSpec, gen_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return ModelConfig(channels=16, window_len=32)


@pytest.fixture
def small_params(small_cfg):
    return init_params(small_cfg, seed=0)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """Four subjects, four 12-second trials each, 16 channels at 64 Hz."""
    out = tmp_path_factory.mktemp("tiny")
    spec = SyntheticSpec(subjects=4, trials_per_subject=4, duration=12.0, snr=4.0, seed=7)
    return gen_synthetic(spec, out)
