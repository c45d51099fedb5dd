import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ipha.nash import sample_monotone_instance
from ipha.space import ScenarioSpace

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_tree_space(rng, max_scenarios=50, stages=None):
    """Random scenario tree with 2-4 stages, built from branching histories."""
    N = stages or int(rng.integers(2, 5))
    while True:
        branching = rng.integers(1, 5, size=N - 1)
        S = int(np.prod(branching))
        if S <= max_scenarios:
            break
    histories = list(np.ndindex(*branching)) if N > 1 else [()]
    # histories[s][k] is what is observed before stage k + 1
    p = rng.dirichlet(np.ones(S))
    p = p / p.sum()
    dims = rng.integers(1, 4, size=N)
    return ScenarioSpace.from_tree(p, dims, [tuple(h) for h in histories])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_nash():
    """A seeded 10-scenario game with two plants per player."""
    return sample_monotone_instance(7, 10, 2, 2)


@pytest.fixture(autouse=True)
def _quiet_monotone_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="instance .* is not monotone")
        yield


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
