import numpy as np
import pytest

from psrnn import oracle

_ACCEPTANCE_LINES = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    _ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(_ACCEPTANCE_LINES[n])


@pytest.fixture(scope="session")
def hmm_spec():
    return oracle.random_spec(3, 4, seed=0)


@pytest.fixture(scope="session")
def hmm_corpus(hmm_spec):
    """20k training and 5k test symbols from the seed-0 spec."""
    seq = oracle.sample(hmm_spec, 25_000, seed=0)
    return seq[:20_000], seq[20_000:]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
