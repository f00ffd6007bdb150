import numpy as np
import pytest
from hypothesis import settings

from longterm_effects.core import ExperimentDataset

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def random_dataset(rng, k=2, n_per=6, T=4, d=2, scale=1.0):
    obs = scale * rng.standard_normal((k * n_per, T + 1, d))
    pol = np.repeat(np.arange(k), n_per)
    ids = tuple(f"u{j}" for j in range(k * n_per))
    return ExperimentDataset(obs, pol, ids, k)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
