import numpy as np
import pytest

from softdistill.data import SyntheticConfig, generate_synthetic
from softdistill.nn import MlpSpec, init_mlp


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_task():
    cfg = SyntheticConfig(mean_scale=0.65, n_train=300, n_val=300, n_gallery=1200, seed=3)
    return generate_synthetic(cfg)


@pytest.fixture
def tiny_model():
    return init_mlp(MlpSpec([5, 7, 6, 3]), seed=11)


# acceptance criteria: one PASS/FAIL line each in the terminal summary

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = report.failed
    if report.when == "call" or failed:
        prev = _criteria.get(number)
        if prev is None or prev[1] == "PASS":
            detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
            _criteria[number] = (title, "FAIL" if failed else "PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, detail = _criteria[number]
        line = f"criterion {number:2d} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
