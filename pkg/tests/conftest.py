import numpy as np
import pytest

from sora.core import SoraAdapter

_ACCEPTANCE = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _ACCEPTANCE.setdefault(number, {"title": title, "passed": True, "ran": False})
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        entry["ran"] = True
        if call.excinfo is not None:
            entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        entry = _ACCEPTANCE[number]
        status = "PASS" if entry["passed"] and entry["ran"] else ("FAIL" if entry["ran"] else "NOT RUN")
        line = f"criterion {number:2d} [{status}] {entry['title']}"
        if entry.get("notes"):
            line += " | " + "; ".join(entry["notes"])
        terminalreporter.write_line(line)


@pytest.fixture
def note(request):
    """Attach a measured value to the acceptance summary line of the current test's criterion."""
    marker = request.node.get_closest_marker("acceptance")
    number, title = marker.args
    entry = _ACCEPTANCE.setdefault(number, {"title": title, "passed": True, "ran": False})

    def add(text):
        entry.setdefault("notes", []).append(text)

    return add


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_adapter(rng, p, q, r, zero_frac=0.0):
    w0 = rng.standard_normal((p, q))
    gate = rng.standard_normal(r)
    if zero_frac:
        gate[rng.random(r) < zero_frac] = 0.0
    return SoraAdapter(w0, rng.standard_normal((r, q)), rng.standard_normal((p, r)), gate)


@pytest.fixture
def make_adapter():
    return random_adapter
