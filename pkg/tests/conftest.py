import numpy as np
import pytest

from apt_upscale.grid import LatentGrid

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, {"title": title, "passed": True, "tests": []})
    entry["passed"] &= rep.passed
    entry["tests"].append((item.name, rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        status = "PASS" if e["passed"] else "FAIL"
        tr.write_line(f"[{status}] {n:>2}. {e['title']}")
        if not e["passed"]:
            for name, outcome in e["tests"]:
                tr.write_line(f"          {outcome:>7}  {name}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_grid(rng, h, w, c=1, scale=1.0, shift=0.0):
    return LatentGrid(shift + scale * rng.standard_normal((h, w, c)))
