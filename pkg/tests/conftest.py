import numpy as np
import pytest

from dvmpc.lq_oracle import scalar_problem, solve_riccati


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scalar_solution():
    """A=0, B=1, Q=1, R=1, Q_f=0, lambda=1, T=1: P(t) = tanh(T - t), c(t) = 0.5 log cosh(T - t)."""
    return solve_riccati(scalar_problem(T=1.0), 1e-3)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
