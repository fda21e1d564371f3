"""
Shared pytest fixtures.
"""

import numpy as np
import pytest

from tdasep.config import ModelConfig
from tdasep.numerics import precision, set_finite_checks
from tdasep.presets import ModelPresets


@pytest.fixture(autouse=True)
def finite_checks():
    """Every primitive asserts finite outputs while tests run."""
    set_finite_checks(True)
    yield
    set_finite_checks(False)


@pytest.fixture
def float64():
    with precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig.create(**ModelPresets.get("tiny"))


@pytest.fixture
def output_dir(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    return out
