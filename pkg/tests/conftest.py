import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion")
    config._criteria = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        outcome_name = "info" if marker.kwargs.get("informational") and report.passed else report.outcome
        item.config._criteria.append((*marker.args, outcome_name, detail))


def pytest_terminal_summary(terminalreporter, config):
    rows = sorted(config._criteria, key=lambda r: str(r[0]))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome, detail in rows:
        status = {"passed": "PASS", "failed": "FAIL", "info": "INFO"}.get(outcome, outcome.upper())
        line = f"criterion {number}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
