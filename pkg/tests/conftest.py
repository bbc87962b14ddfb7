import pytest

from cgsysid import _hot

BACKENDS = ["numpy"] + (["numba"] if _hot.HAVE_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    """Run the test once per available hot-loop backend."""
    with _hot.use_backend(request.param):
        yield request.param


_ACCEPTANCE = {}


@pytest.fixture
def record():
    """Store one pass/fail line per acceptance criterion."""
    def _record(number, ok, detail):
        _ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
