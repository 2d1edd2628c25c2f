import numpy as np
import pytest

ACCEPTANCE_LINES = []


def record(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{criterion}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_state(dim, rng, rank=None):
    """Random density matrix of the given rank (full rank by default)."""
    rank = rank or dim
    a = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = a @ a.conj().T
    return rho / np.trace(rho).real


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
