import numpy as np
import pytest

from d2conv3d.tensor import KernelWeights


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_weights(rng, c_out, c_in, kernel=(3, 3, 3), bias=True, scale=1.0):
    w = rng.normal(0.0, scale, size=(c_out, c_in, *kernel))
    b = rng.normal(0.0, scale, size=c_out) if bias else None
    return KernelWeights(w, b)


ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion."""
    results = request.config.stash[ACCEPTANCE]

    def record(number, title, ok, detail):
        results[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
