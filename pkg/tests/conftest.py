from __future__ import annotations

import shutil
from pathlib import Path

import pytest

from surgnarr.synth import write_fixture_set

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures" / "synthetic"

_acceptance: list[tuple[int, str, str]] = []


def pytest_configure(config: pytest.Config) -> None:
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item: pytest.Item, call: pytest.CallInfo):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _acceptance.append((number, title, "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter, exitstatus, config) -> None:
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status in sorted(_acceptance):
        terminalreporter.write_line(f"criterion {number:2d} {status}: {title}")


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """The bundled 5-video corpus, copied so tests can never modify it."""
    root = tmp_path_factory.mktemp("fixtures")
    if FIXTURES.is_dir():
        shutil.copytree(FIXTURES, root, dirs_exist_ok=True)
    else:
        write_fixture_set(root)
    return root
