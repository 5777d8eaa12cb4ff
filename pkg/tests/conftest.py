import numpy as np
import pytest

from fiowave.spectral_core import Grid


@pytest.fixture(scope="session")
def g64():
    return Grid(64)


@pytest.fixture(scope="session")
def g128():
    return Grid(128)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line ``criterion <n>: PASS|FAIL  <detail>`` and assert it."""

    def record(n: int, ok: bool, detail: str):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
