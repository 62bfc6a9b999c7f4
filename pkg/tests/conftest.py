import numpy as np
import pytest

from spmp.spectral import SpectralBasis
from spmp.stochastics import SeedPolicy, TimeGrid

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def basis16():
    return SpectralBasis(16)


@pytest.fixture(scope="session")
def basis64():
    return SpectralBasis(64)


@pytest.fixture
def seeds():
    return SeedPolicy(7)


@pytest.fixture
def grid64():
    return TimeGrid(1.0, 64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split()[0])):
            terminalreporter.write_line(line)
