import numpy as np
import pytest

from stare.roi_map import grid_map


@pytest.fixture
def grid2():
    """2 x 2 grid over a 100 x 100 image, ids row-major 0..3."""
    return grid_map(2, 2, 100.0, 100.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict: ``criterion(n, ok, detail)``."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(n: int, ok: bool, detail: str) -> bool:
        results[n] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
