import numpy as np
import pytest

from msgl import autodiff as ad


@pytest.fixture(autouse=True)
def strict_numerics():
    # every op output is checked for NaN/Inf during the unit tests
    with ad.strict(True):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA: dict = {}


@pytest.fixture
def report(request):
    """Attach a one-line detail to the running criterion."""
    def put(text):
        request.node.user_properties.append(("detail", text))
    return put


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    crit = dict(report.user_properties).get("criterion")
    if crit is not None:
        _CRITERIA[crit[0]] = (crit[1], report.outcome, dict(report.user_properties).get("detail", ""))


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", tuple(mark.args)))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, outcome, detail = _CRITERIA[num]
        flag = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"criterion {num:>2} {flag}  {title}: {detail}")
