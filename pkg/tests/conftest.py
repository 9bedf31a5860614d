import numpy as np
import pytest
import torch

from gatefeat.extraction import TinyBackend


@pytest.fixture(scope="session")
def tiny():
    return TinyBackend(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def image(rng):
    img = rng.integers(0, 60, size=(64, 64, 3)).astype(np.uint8)
    img[16:40, 20:44] = (220, 40, 40)
    return img


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# acceptance criteria: tests marked ``criterion(n, title)`` get one summary line each
_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.skipped):
        status = "SKIP" if rep.skipped else ("PASS" if rep.passed else "FAIL")
        _CRITERIA[n] = (status, title, rep.duration, item.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, dur, props = _CRITERIA[n]
        detail = ", ".join(f"{k}={v}" for k, v in props)
        terminalreporter.write_line(f"[{status}] {n}. {title} ({dur:.1f}s){'  ' + detail if detail else ''}")
