import numpy as np
import pytest
from hypothesis import settings

from nwsr import simulate

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_layout():
    return simulate.generate_layout(12.0, 2.5, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: one line per `criterion` marker, printed after the run
_CRITERIA = {}
_NOTES = []


@pytest.fixture
def acceptance_note():
    """Append lines to the acceptance section of the terminal summary."""
    return _NOTES.append


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, name): acceptance criterion covered by the test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    n, name = mark.args
    failed = call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception)
    prev = _CRITERIA.get(n, (name, True))
    if call.when == "call" or failed:
        _CRITERIA[n] = (name, prev[1] and not failed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, ok = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {name}")
    for line in _NOTES:
        terminalreporter.write_line(line)
