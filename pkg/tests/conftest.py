import re

import pytest

_RESULTS = pytest.StashKey[dict]()
CRITERIA = [str(i) for i in range(1, 13)]


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line; call it before asserting so failures are listed too."""
    results = request.config.stash[_RESULTS]

    def record(key: str, passed: bool, detail: str) -> bool:
        results[key] = (bool(passed), detail)
        print(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
        return bool(passed)

    return record


def _order(key):
    m = re.match(r"(\d+)(.*)", key)
    return (int(m.group(1)), m.group(2)) if m else (99, key)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    seen = {re.match(r"\d+", k).group(0) for k in results}
    for key in sorted(results, key=_order):
        passed, detail = results[key]
        terminalreporter.write_line(f"criterion {key:<4} {'PASS' if passed else 'FAIL'}  {detail}")
    for key in CRITERIA:
        if key not in seen:
            terminalreporter.write_line(f"criterion {key:<4} NOT RUN")
