import sys

import numpy as np
import pytest

sys.path.insert(0, __import__("os").path.dirname(__file__))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def criterion(request):
    """Attach a one-line detail to an acceptance test; the summary prints it with the outcome."""

    def note(detail):
        request.node.user_properties.append(("criterion", detail))

    return note


_RESULTS = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if item.module.__name__.endswith("test_acceptance") and (rep.when == "call" or rep.failed):
        if rep.when == "call" or rep.when == "setup":
            detail = "; ".join(v for k, v in item.user_properties if k == "criterion")
            _RESULTS.append((item.name, "PASS" if rep.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in _RESULTS:
        terminalreporter.write_line(f"{status}  {name}" + (f"  ({detail})" if detail else ""))
