import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from clusterdyn import make_model

settings.register_profile("default", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_model(rng, levels, outcomes=2, scores=None):
    q_l = rng.dirichlet(np.ones(levels))
    q_y = rng.dirichlet(np.ones(outcomes), size=(2, levels))
    return make_model(q_l, q_y, scores)


@st.composite
def pmfs(draw, size, min_mass=0.0):
    raw = np.array(draw(st.lists(st.floats(0.05, 1.0), min_size=size, max_size=size)))
    return raw / raw.sum()


@st.composite
def compositions(draw, max_n=12, max_k=4, min_n=0):
    k = draw(st.integers(1, max_k))
    n = draw(st.integers(min_n, max_n))
    cuts = sorted(draw(st.lists(st.integers(0, n), min_size=k - 1, max_size=k - 1)))
    edges = [0] + cuts + [n]
    return np.diff(edges).astype(np.int64)


@pytest.fixture
def coverage_model():
    return make_model(
        [0.3, 0.3, 0.4],
        [[[0.6, 0.4], [0.5, 0.5], [0.7, 0.3]], [[0.3, 0.7], [0.45, 0.55], [0.4, 0.6]]],
    )


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
