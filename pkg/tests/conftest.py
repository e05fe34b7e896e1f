import contextlib
import os
import sys
import time

import pytest

sys.path.insert(0, os.path.dirname(__file__))  # for the oracles helper module

_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_KEY] = []


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance criterion as PASS or FAIL."""
    results = request.config.stash[_KEY]

    @contextlib.contextmanager
    def run(number, title):
        info = {}
        start = time.perf_counter()
        try:
            yield info
        except BaseException as e:
            results.append((number, title, False, f"{type(e).__name__}: {e}".splitlines()[0],
                            time.perf_counter() - start))
            raise
        results.append((number, title, True, info.get("detail", ""), time.perf_counter() - start))

    return run


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_KEY]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail, secs in sorted(results):
        line = f"[{'PASS' if ok else 'FAIL'}] {number}. {title} ({secs:.1f}s)"
        if detail:
            line += f": {detail}"
        terminalreporter.write_line(line)
