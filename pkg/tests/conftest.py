import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record the PASS/FAIL line for one acceptance criterion.

    Usage: ``with criterion(3, "description") as c: ...; c.detail = "..."``.
    The line is written even when an assertion inside the block fails.
    """

    class _Block:
        def __init__(self, number, title):
            self.number, self.title, self.detail = number, title, ""

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            status = "PASS" if exc_type is None else "FAIL"
            line = f"{status} criterion {self.number}: {self.title}"
            if self.detail:
                line += f" ({self.detail})"
            if exc_type is not None and exc is not None:
                line += f" [{str(exc).splitlines()[0] if str(exc) else exc_type.__name__}]"
            _ACCEPTANCE[self.number] = line
            print(line)
            return False

    return _Block


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
