import datetime as dt
import os
import shutil
from pathlib import Path

import pytest

from bifurcate.cli import config, runs
from bifurcate.cli.main import main
from bifurcate.errors import DependencyError

ARTIFACTS = Path(os.environ.get("BIFURCATE_ACCEPTANCE_DIR",
                                Path(__file__).resolve().parent.parent / "acceptance-runs"))

_verdicts: list[str] = []


def cached_run(subcommand: str, name: str, overrides=(), seed: int = 0) -> Path:
    """Run a desk-profile subcommand into ``ARTIFACTS/name`` unless an identical run is already there.

    A stored run is reused only when it finished, and its config, seed and
    package source hash all match; anything else is deleted and rerun.
    """
    out = ARTIFACTS / name
    overrides = list(overrides)
    cfg = config.resolve(subcommand, "desk", overrides=overrides)
    try:
        man = runs.RunManifest.read(out)
        if (man.status == "complete" and man.config == cfg and man.seed == seed
                and man.code_version == runs.code_version()):
            return out
    except DependencyError:
        pass
    if out.exists():
        shutil.rmtree(out)
    args = [subcommand, "--profile", "desk", "--out", str(out), "--seed", str(seed)]
    for o in overrides:
        args += ["--set", o]
    assert main(args) == 0, f"{subcommand} failed"
    return out


def wall_seconds(run_dir) -> float:
    """Wall-clock duration recorded in a finished run's manifest."""
    man = runs.RunManifest.read(run_dir)
    return (dt.datetime.fromisoformat(man.finished) - dt.datetime.fromisoformat(man.started)).total_seconds()


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance clause; all lines are echoed at the end of the session."""
    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"{label} {'PASS' if ok else 'FAIL'}: {detail}"
        print(line)
        _verdicts.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance verdicts")
        for line in _verdicts:
            terminalreporter.write_line(line)
