import numpy as np
import pytest
import torch

from csfinpaint.dropout import make_rng
from csfinpaint.losses import toy_extractor
from csfinpaint.phantom import make_phantom


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(scope="session")
def phantom32():
    return make_phantom((32, 32, 32), make_rng(0))


@pytest.fixture(scope="session")
def phantom48():
    return make_phantom((48, 48, 48), make_rng(0))


@pytest.fixture
def toy_fx():
    return toy_extractor(seed=0)


def cube_phantom(n=16, border=2, value=1.0):
    """Solid cube of ``value`` with a zero border."""
    img = np.zeros((n, n, n), dtype=np.float32)
    img[border:n - border, border:n - border, border:n - border] = value
    return img


# ---------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per criterion
# ---------------------------------------------------------------------------

ACCEPTANCE_CRITERIA = {
    1: "dropout suite",
    2: "SPE suite",
    3: "composite / preservation",
    4: "loss oracle suite",
    5: "fusion suite",
    6: "shape suite",
    7: "overfit smoke test",
    8: "fine-tune direction test",
    9: "CSF-mode mask",
    10: "stats",
}
_acceptance: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None or (report.when != "call" and report.passed):
        return
    entry = _acceptance.setdefault(marker, {"ok": True, "details": []})
    if report.failed:
        entry["ok"] = False
    for key, value in report.user_properties:
        if key == "detail":
            entry["details"].append(value)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        report.criterion = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, name in ACCEPTANCE_CRITERIA.items():
        entry = _acceptance.get(n)
        if entry is None:
            tr.write_line(f"criterion {n:2d} NOT RUN  {name}")
            continue
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(entry["details"])
        tr.write_line(f"criterion {n:2d} {status}  {name}" + (f": {detail}" if detail else ""))
