import pytest
import torch

from metacfg._accel import HAVE_NUMBA
from metacfg.grammar import load_preset

torch.set_num_threads(1)

BACKENDS = ["numpy"] + (["numba"] if HAVE_NUMBA else [])


@pytest.fixture(scope="session")
def fig21():
    return load_preset("fig21")


@pytest.fixture(scope="session")
def toy_a():
    return load_preset("toy_a")


@pytest.fixture(scope="session")
def toy_b():
    return load_preset("toy_b")


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running (desk-scale training)")
