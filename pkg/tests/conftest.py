import numpy as np
import pytest

from cada import nn


@pytest.fixture
def f64():
    with nn.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record the outcome of an acceptance criterion: call with (number, detail) before asserting."""
    state = {}

    def record(number: int, title: str, detail: str = "") -> None:
        state.update(number=number, title=title, detail=detail)

    yield record
    if state:
        rep = getattr(request.node, "rep_call", None)
        ok = rep is not None and rep.passed
        line = f"criterion {state['number']}: {'PASS' if ok else 'FAIL'}  {state['title']}"
        if state["detail"]:
            line += f"  [{state['detail']}]"
        ACCEPTANCE[state["number"]] = line


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
