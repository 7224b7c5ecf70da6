import numpy as np
import pytest

from collab_ad.clr import TrainConfig
from collab_ad.synth import SynthConfig, generate


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fast_cfg():
    """Short no-dropout training budget for unit tests."""
    return TrainConfig(epochs=8, batch_size=128, lr=3e-3, steps_per_epoch=40, dropout=(0.0, 0.0, 0.0))


@pytest.fixture(scope="session")
def small_bench():
    return generate(SynthConfig(L=4, d=4, k=2, n_per_category=150, seed=3))


ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
