import numpy as np
import pytest

from patchar import numerics as nx


def gradcheck(build, inputs, h=1e-5):
    """Max relative error between autodiff and central differences.

    ``build(*tensors)`` returns a scalar Tensor; ``inputs`` are numpy arrays.
    """
    params = [nx.Parameter(x.copy()) for x in inputs]
    loss = build(*params)
    nx.backward(loss)
    worst = 0.0
    for p in params:

        def f():
            with nx.no_grad():
                return float(build(*params).data)

        num = nx.finite_difference_grad(f, p.data, h)
        scale = max(np.abs(num).max(), np.abs(p.grad).max(), 1e-8)
        worst = max(worst, float(np.abs(num - p.grad).max() / scale))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ----------------------------------------------------------------
# Tests marked ``acceptance(n, title)`` get one PASS/FAIL line each in the terminal
# summary, with whatever they attached through the ``accept_detail`` fixture.

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.fixture
def accept_detail(request):
    def note(text: str) -> None:
        request.node.user_properties.append(("detail", text))
        print(text)

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        if failed and number in _ACCEPTANCE and _ACCEPTANCE[number][0] == "FAIL":
            return
        _ACCEPTANCE[number] = ("FAIL" if failed else "PASS", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        line = f"[{status}] {number:>2}. {title}"
        terminalreporter.write_line(line + (f" | {detail}" if detail else ""))
