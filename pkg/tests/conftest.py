import numpy as np
import pytest

from slacc.core import Direction, SmashedData


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_smashed(rng, shape=(2, 4, 3, 3), round=0, direction=Direction.ACTIVATIONS):
    return SmashedData(rng.normal(size=shape), round, direction)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict(request):
    """Record a one-line PASS/FAIL summary for an acceptance criterion."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
