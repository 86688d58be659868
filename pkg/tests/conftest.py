import numpy as np
import pytest
from hypothesis import strategies as st

from fusion_shrinkage.core import FusionInput, WeightedLossSpec


def make_input(tau_r, tau_o, sigma_r2, d=None, sigma_o2=None):
    K = len(tau_r)
    weights = WeightedLossSpec.uniform(K) if d is None else WeightedLossSpec(d)
    return FusionInput(tau_r, tau_o, sigma_r2, weights, sigma_o2)


@st.composite
def fusion_inputs(draw, min_K=1, max_K=12, separated=True):
    K = draw(st.integers(min_K, max_K))
    finite = dict(allow_nan=False, allow_infinity=False)
    tau_r = draw(st.lists(st.floats(-10, 10, **finite), min_size=K, max_size=K))
    tau_o = draw(st.lists(st.floats(-10, 10, **finite), min_size=K, max_size=K))
    s2 = draw(st.lists(st.floats(0.01, 5, **finite), min_size=K, max_size=K))
    raw = draw(st.lists(st.floats(0.05, 1, **finite), min_size=K, max_size=K))
    if separated:
        delta = np.array(tau_o) - np.array(tau_r)
        if np.sum(delta**2) < 1e-6:
            tau_o = list(np.array(tau_r) + 1.0)
    return FusionInput(tau_r, tau_o, s2, WeightedLossSpec.normalized(raw))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance summary ---------------------------------------------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = marker.args
        entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
        entry["ok"] &= rep.passed
        entry["details"] += [v for k, v in rep.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} {status}  {entry['title']}")
        for detail in entry["details"]:
            terminalreporter.write_line(f"              {detail}")
