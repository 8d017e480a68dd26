from __future__ import annotations

import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


CRITERIA = {
    1: "matrix conformance",
    2: "delivery fuzz",
    3: "no-zeroing ring equivalence",
    4: "ordering-requirement enforcement",
    5: "shared-ring concurrency",
    6: "broadcast",
    7: "device-memory model",
    8: "zero-copy accounting",
    9: "memory scaling",
    10: "bimodal pull latency",
}
_outcomes: dict = {}  # criterion -> list of per-test pass flags


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    rep = outcome.get_result()
    if mark is None:
        return
    # one entry per test: its call phase, or the setup phase if that failed or skipped
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes.setdefault(mark.args[0], []).append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        runs = _outcomes.get(n, [])
        status = "NOT RUN" if not runs else "PASS" if all(runs) else "FAIL"
        terminalreporter.write_line(f"C{n} {name}: {status} ({sum(runs)}/{len(runs)} tests)")
