import pytest

from diagengine.config import bundled_model_path
from diagengine.model_io import load_model


@pytest.fixture(scope="session")
def three_tank():
    return load_model(bundled_model_path("three_tank"))


@pytest.fixture(scope="session")
def two_tank():
    return load_model(bundled_model_path("two_tank"))
