import numpy as np
import pytest

from partnest import simulation as sim


def simulated(label="no_em", outcome="binary", seed=3, n=None):
    sc = sim.scenario(label, outcome)
    cohort = sim.generate_full_nested(sc, np.random.default_rng(seed), n=n)
    return sim.induce_partial_nesting(cohort)


@pytest.fixture(scope="session")
def sim_data():
    return simulated()


@pytest.fixture(scope="session")
def sim_data_continuous():
    return simulated(outcome="continuous", seed=5)


# lines appended by the acceptance suite, shown at the end of every run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
