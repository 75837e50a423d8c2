import time
from contextlib import contextmanager

import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """Context manager that records one PASS/FAIL line per acceptance criterion.

    It yields a list; strings appended to it are shown under the line.
    """
    results = request.config.stash[_RESULTS]

    @contextmanager
    def run(number, title):
        t0 = time.perf_counter()
        status = "FAIL"
        notes = []
        try:
            yield notes
            status = "PASS"
        finally:
            line = f"criterion {number:>2} {status}  {title}  ({time.perf_counter() - t0:.1f} s)"
            results[number] = "\n".join([line] + [f"    {n}" for n in notes])
            print(results[number])

    return run


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
