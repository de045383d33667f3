from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from refseg.synthetic import build_planted_dataset  # noqa: E402

_criteria: dict[str, str] = {}
_outcomes: dict[str, tuple[str, float]] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m and m.args:
            callspec = getattr(item, "callspec", None)
            suffix = f" [{callspec.id}]" if callspec else ""
            _criteria[item.nodeid] = m.args[0] + suffix


def pytest_runtest_logreport(report):
    if report.nodeid not in _criteria:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _outcomes[report.nodeid] = (outcome, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, name in _criteria.items():
        if nodeid in _outcomes:
            outcome, dur = _outcomes[nodeid]
            terminalreporter.write_line(f"{outcome:4}  {name}  ({dur:.2f}s)")


@pytest.fixture(scope="session")
def planted(tmp_path_factory):
    return build_planted_dataset(tmp_path_factory.mktemp("planted"))


@pytest.fixture
def cache_dir(tmp_path, monkeypatch):
    d = tmp_path / "cache"
    monkeypatch.setenv("REFSEG_CACHE_DIR", str(d))
    return d
