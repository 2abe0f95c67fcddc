import numpy as np
import pytest

from puail.mdp import TabularMdp, canonical_gridworld, gridworld


@pytest.fixture(scope="session")
def grid8():
    return canonical_gridworld()


@pytest.fixture(scope="session")
def grid4():
    return gridworld("S...\n....\n....\n...G", slip=0.1, gamma=0.95)


def single_state(reward=1.0, gamma=0.9, n_actions=1):
    P = np.ones((1, n_actions, 1))
    R = np.full((1, n_actions), reward)
    return TabularMdp(P, R, gamma, np.ones(1))


def chain_mdp(gamma=0.5):
    """0 -> 1 -> 1 with a single action."""
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    P[1, 0, 1] = 1.0
    return TabularMdp(P, np.zeros((2, 1)), gamma, np.array([1.0, 0.0]))


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
