import contextlib
import time

import pytest

_CRITERIA = []


@pytest.fixture
def criterion():
    """``with criterion(name, limit_s):`` records one PASS/FAIL line with its wall time."""

    @contextlib.contextmanager
    def run(name, limit=None):
        t0 = time.perf_counter()
        ok = False
        try:
            yield
            ok = True
        finally:
            dt = time.perf_counter() - t0
            slow = limit is not None and dt >= limit
            status = "PASS" if ok and not slow else "FAIL"
            budget = f" (limit {limit:g} s)" if limit is not None else ""
            note = " over time limit" if ok and slow else ""
            line = f"{status}  {name}  {dt:.2f} s{budget}{note}"
            _CRITERIA.append(line)
            print(line)
        if slow:
            pytest.fail(f"{name}: took {dt:.2f} s, limit {limit} s")

    return run


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
