import numpy as np
import pytest

from adm.distributions import GaussianStats

_criteria: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    if report.when == "call" or report.outcome != "passed":
        if report.when == "call" or marker not in _criteria:
            _criteria[marker] = "PASS" if report.outcome == "passed" else "FAIL"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion = mark.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict in _criteria.items():
        terminalreporter.write_line(f"{verdict}  {name}")


def random_spd(rng, c, floor=0.5):
    a = rng.standard_normal((c, c))
    return a.T @ a / c + floor * np.eye(c)


def random_stats(rng, c):
    return GaussianStats.from_params(rng.standard_normal(c), random_spd(rng, c))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
