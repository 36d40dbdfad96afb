import numpy as np
import pytest

from ttt4rec import tensor as T


@pytest.fixture(autouse=True)
def finite_checks():
    # test builds surface NaN/Inf at the op that produced it
    with T.check_finite(True):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numba", "numpy"])
def kernel_backend(request):
    from ttt4rec import _accel

    if request.param == "numba" and not _accel.NUMBA_AVAILABLE:
        pytest.skip("numba not installed")
    previous = _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(previous)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
