import numpy as np
import pytest

from advtrans import nn
from advtrans.data import generate_synthetic
from advtrans.nn import SGDConfig


@pytest.fixture(scope="session")
def blobs():
    """Small, easy 4-class synthetic set on 12x12 images."""
    return generate_synthetic("gaussian-blobs", 240, 4, 12, seed=3, noise=0.1)


@pytest.fixture(scope="session")
def blobs_test():
    return generate_synthetic("gaussian-blobs", 80, 4, 12, seed=4, noise=0.1)


@pytest.fixture(scope="session")
def tiny_fb(blobs):
    spec = nn.desk_fb_spec(4, 12, hidden=16)
    return nn.train_standard(nn.init_params(spec, 1), blobs, SGDConfig(0.05, 0.9, 3, 32), 0).model


@pytest.fixture(scope="session")
def tiny_fa(blobs):
    spec = nn.desk_fa_spec(4, 12)
    return nn.train_standard(nn.init_params(spec, 2), blobs, SGDConfig(0.05, 0.9, 3, 32), 0).model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
