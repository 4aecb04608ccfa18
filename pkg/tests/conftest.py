import contextlib
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``with criterion(n, "name", limit_s) as detail: ...``."""
    lines = request.config.stash.setdefault(_CRITERIA, {})

    @contextlib.contextmanager
    def run(number, name, limit_s):
        detail = {}
        start = time.perf_counter()
        ok = False
        try:
            yield detail
            elapsed = time.perf_counter() - start
            detail["runtime"] = f"{elapsed:.2f}s/{limit_s}s"
            assert elapsed < limit_s, f"runtime {elapsed:.2f}s exceeds {limit_s}s"
            ok = True
        finally:
            info = ", ".join(f"{k}={v}" for k, v in detail.items())
            line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}  ({info})"
            lines[number] = line
            print(line)

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
