import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from roaddistress.model import ImageMeta  # noqa: E402


@pytest.fixture
def meta600():
    return ImageMeta("img1.jpg", 600, 600)


_ACCEPTANCE = pytest.StashKey[list]()  # (criterion, passed, detail) in run order


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when != "call":
        return
    ok = call.excinfo is None
    detail = dict(item.user_properties).get("detail", "")
    if not ok:
        error = call.excinfo.exconly().splitlines()[0]
        detail = f"{detail}; {error}" if detail else error
    item.config.stash.setdefault(_ACCEPTANCE, []).append((marker.args[0], ok, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in results:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f": {detail}" if detail else ""))
