import pytest
import torch

from routed_attn.grid import ProjectionSet
from routed_attn.rng import Stream


@pytest.fixture
def st(request):
    return Stream(7, ("tests", request.node.name))


def rand_proj(s: Stream, d: int, scale: float = 1 / 3) -> ProjectionSet:
    return ProjectionSet(s.normal(d, d) * scale, s.normal(d, d) * scale, s.normal(d, d) * scale)


def maxdiff(a, b) -> float:
    return float((torch.as_tensor(a) - torch.as_tensor(b)).abs().max())


# acceptance reporting: one line per criterion in the terminal summary

_CRITERIA: dict[str, tuple[int, str]] = {}
_OUTCOMES: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _CRITERIA[item.nodeid] = (m.args[0], m.args[1])


def pytest_runtest_logreport(report):
    if report.nodeid not in _CRITERIA:
        return
    n, title = _CRITERIA[report.nodeid]
    if report.when == "setup":
        _OUTCOMES[n] = [title, report.outcome, report.duration, ""]
    elif report.when == "call":
        details = ", ".join(f"{k}={v}" for k, v in report.user_properties)
        _OUTCOMES[n] = [title, report.outcome, _OUTCOMES[n][2] + report.duration, details]


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        title, outcome, dur, details = _OUTCOMES[n]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {n:2d} {verdict}  {title} ({dur:.1f} s)"
        terminalreporter.write_line(line + (f"  [{details}]" if details else ""))
