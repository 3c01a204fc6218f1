import numpy as np
import pytest

from layerdiff.config import tiny_config, toy_config
from layerdiff.denoiser import MildModel
from layerdiff.rng import DRng


@pytest.fixture
def rng():
    return DRng(1234)


@pytest.fixture
def tiny_cfg():
    return tiny_config(8)


@pytest.fixture
def tiny_model(tiny_cfg):
    return MildModel(tiny_cfg.model)


@pytest.fixture
def toy_cfg():
    return toy_config(16)


def perturb(model, rng, scale=0.1):
    """Move every parameter off its (often zero) initial value."""
    for name, p in sorted(model.named_parameters()):
        p.data += scale * rng.spawn("perturb", name).normal(p.shape)
    return model


@pytest.fixture
def assert_bits():
    def check(a, b):
        a, b = np.asarray(a), np.asarray(b)
        assert a.shape == b.shape
        assert a.tobytes() == b.tobytes()
    return check
