import numpy as np
import pytest

from distid.datamodel import IoDataset, Partition


def random_instance(rng, n_agents=3, max_in=2, max_out=2, T=None, exact=True):
    """Small random ``(dataset, partition, A)`` with contiguous agent blocks."""
    du = rng.integers(1, max_in + 1, n_agents)
    dy = rng.integers(1, max_out + 1, n_agents)
    part = Partition.contiguous(du, dy)
    T = T or 2 * part.m
    A = rng.standard_normal((part.n, part.m))
    U = rng.standard_normal((part.m, T))
    Y = A @ U if exact else rng.standard_normal((part.n, T))
    return IoDataset(U, Y), part, A


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}")
