import json
import shutil
from pathlib import Path

import pytest

from covclose import fixture_dir
from covclose.state import RunConfig

_acceptance: dict[str, str] = {}


@pytest.fixture
def handshake(tmp_path: Path) -> Path:
    """Private copy of the bundled fixture with the workspace redirected into tmp."""
    dst = tmp_path / "fixture"
    shutil.copytree(fixture_dir(), dst)
    cfg = json.loads((dst / "config.json").read_text())
    cfg["workspace_dir"] = str(tmp_path / "ws")
    (dst / "config.json").write_text(json.dumps(cfg, indent=2))
    return dst


@pytest.fixture
def handshake_config(handshake: Path) -> RunConfig:
    return RunConfig.load(handshake / "config.json")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    if "acceptance" not in report.keywords:
        return
    name = report.nodeid.split("::")[-1]
    _acceptance[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance):
        terminalreporter.write_line(f"{_acceptance[name]}  {name}")
