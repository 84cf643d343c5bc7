import pytest

from proccaps.colorspace import build_gamut_grid
from proccaps.network import desk_config


@pytest.fixture(scope="session")
def grid():
    return build_gamut_grid(10)


@pytest.fixture(scope="session")
def desk(grid):
    return desk_config(grid.Q)


# One summary line per acceptance criterion.

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if report.when == "call" or report.failed:
        status = "PASS" if report.passed else "FAIL"
        if report.skipped:
            status = "SKIP"
        detail = ""
        if report.failed and call.excinfo is not None:
            detail = str(call.excinfo.value).splitlines()[0][:160]
        prev = _criteria.get(n)
        if prev is None or prev[0] == "PASS":
            _criteria[n] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, title, detail = _criteria[n]
        line = f"criterion {n:2d} {status}  {title}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
