import numpy as np
import pytest

from seqbo.seqcore import CANONICAL_RESIDUES, CdrMask, RngStream, parse_sequence


def random_chain(rng, n):
    return "".join(rng.choice(list(CANONICAL_RESIDUES), n))


@pytest.fixture
def wt():
    rng = np.random.default_rng(11)
    return parse_sequence(random_chain(rng, 12), random_chain(rng, 10))


@pytest.fixture
def small_mask():
    return CdrMask([2, 5, 14, 18])


@pytest.fixture
def stream():
    return RngStream(1234, "test")


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
