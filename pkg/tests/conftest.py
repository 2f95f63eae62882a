"""Shared fixtures: one full default reproduction run and one twin-run pair.

The full run exercises the default five-seed experiment through the CLI
exactly as a user would invoke it and is consumed by the trend acceptance
tests.  The twin pair runs a scaled-down config twice into separate
directories so byte-level determinism can be checked without paying for two
full runs.
"""

from __future__ import annotations

import json
import os
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path

import pytest

TINY_CONFIG = {
    "corpus": {"train_per_task": 48, "eval_per_task": 16},
    "teacher_train": {"steps": 150, "batch_size": 8, "lr": 0.002},
    "student_train": {"steps": 80, "batch_size": 8, "lr": 0.003},
    "seeds": [0],
    "losses": [{"kind": "xent"}, {"kind": "cat_xent"}, {"kind": "cat_xent_s"}],
}


def run_cli(*args: str, cwd: str | Path | None = None) -> subprocess.CompletedProcess:
    """Invoke the command-line interface in a subprocess."""
    return subprocess.run(
        [sys.executable, "-m", "cascadekit.cli", *args],
        capture_output=True, text=True, cwd=cwd,
    )


def write_tiny_config(path: Path, **sections) -> Path:
    """A small experiment config merged over TINY_CONFIG overrides."""
    cfg = json.loads(json.dumps(TINY_CONFIG))
    for key, value in sections.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    path.write_text(json.dumps(cfg, indent=1), encoding="utf-8")
    return path


@dataclass(frozen=True)
class ReproRun:
    root: Path
    cpu_minutes: float
    stderr: str

    @property
    def results(self) -> dict:
        return json.loads((self.root / "results.json").read_text(encoding="utf-8"))

    @property
    def acceptance(self) -> dict:
        return json.loads((self.root / "acceptance_summary.json").read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def repro_run(tmp_path_factory) -> ReproRun:
    """The default five-seed experiment, reproduced once per test session."""
    out = tmp_path_factory.mktemp("fullrepro") / "run"
    before = os.times()
    proc = run_cli("repro", "--out", str(out))
    after = os.times()
    cpu = (after.children_user - before.children_user
           + after.children_system - before.children_system)
    assert proc.returncode == 0, proc.stderr[-2000:]
    return ReproRun(root=out, cpu_minutes=cpu / 60.0, stderr=proc.stderr)


@pytest.fixture(scope="session")
def twin_runs(tmp_path_factory) -> tuple[Path, Path]:
    """Two runs of one scaled-down config, for byte-identity comparison."""
    base = tmp_path_factory.mktemp("twins")
    cfg = write_tiny_config(base / "config.json")
    dirs = (base / "a", base / "b")
    for out in dirs:
        proc = run_cli("repro", "--config", str(cfg), "--out", str(out))
        assert proc.returncode == 0, proc.stderr[-2000:]
    return dirs
