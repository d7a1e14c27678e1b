import numpy as np
import pytest

from scrsdm import features, synth
from scrsdm.dataio import canonical_scheme


@pytest.fixture(scope="session")
def scheme():
    return canonical_scheme()


@pytest.fixture(scope="session")
def tiny_faces():
    """Eight subjects, three images each."""
    samples, pts68 = synth.make_dataset(8, 3, seed=11, size=160)
    return samples, pts68


@pytest.fixture(scope="session")
def small_basift():
    """A BASIFT model learned from a few thousand patches (quick, not accurate)."""
    return features.train_basift(n_patches=3000, ridge=3.0, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.acceptance_lines = []
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
