import os
import sys
from collections import defaultdict

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

# criterion number -> list of (part, passed, detail)
_ACCEPTANCE: dict[int, list] = defaultdict(list)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        ok = rep.passed and not hasattr(rep, "wasxfail")
        detail = dict(item.user_properties).get("detail", "")
        if not ok and not detail:
            detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "failed"
        _ACCEPTANCE[mark.args[0]].append((item.name, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        parts = _ACCEPTANCE[n]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{d}" + ("" if p else " [FAIL]") for _, p, d in parts if d or not p)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
