"""Command-line interface: exit codes, artifact side effects, stream hygiene.

Every test invokes the installed entry point in a subprocess, so argument
parsing, config loading, and error-to-exit-code mapping are exercised the
way a shell user sees them.  Exit code 0 means success, 1 means a usage or
configuration mistake, 2 means a runtime failure mid-pipeline.
"""

import json
from pathlib import Path

import pytest

from conftest import run_cli, write_tiny_config

MICRO_SECTIONS = dict(
    corpus={"train_per_task": 6, "eval_per_task": 3},
    small_model={"n_layers": 1, "d_model": 8, "d_ff": 16},
    large_model={"n_layers": 1, "d_model": 12, "d_ff": 24},
    teacher_train={"steps": 3, "batch_size": 4},
    student_train={"steps": 3, "batch_size": 4},
    losses=[{"kind": "xent"}, {"kind": "cat_xent"}],
    rules=["average", "sum"],
)


def write_micro_config(path: Path) -> Path:
    """A config small enough that a full pipeline runs in seconds."""
    return write_tiny_config(path, **MICRO_SECTIONS)


@pytest.fixture(scope="module")
def micro_pipeline(tmp_path_factory):
    """Run every subcommand once, in dependency order, via the CLI."""
    base = tmp_path_factory.mktemp("cli")
    cfg = write_micro_config(base / "config.json")
    out = base / "run"
    steps = [
        ("gen-data",),
        ("train", "--role", "large"),
        ("cache-teacher",),
        ("train", "--role", "small", "--loss", "xent"),
        ("train", "--role", "small", "--loss", "cat_xent"),
        ("eval-cascade",),
        ("sweep",),
        ("report",),
    ]
    procs = []
    for step in steps:
        proc = run_cli(*step, "--config", str(cfg), "--out", str(out))
        assert proc.returncode == 0, f"{step}: {proc.stderr[-1500:]}"
        procs.append(proc)
    return out, cfg, procs


class TestPipelineFlow:
    def test_all_steps_exit_zero(self, micro_pipeline):
        _, _, procs = micro_pipeline
        assert [p.returncode for p in procs] == [0] * 8

    def test_artifacts_appear_where_documented(self, micro_pipeline):
        out, _, _ = micro_pipeline
        for rel in (
            "data/corpus.jsonl",
            "data/vocab.json",
            "models/teacher.ckpt",
            "cache/teacher_train.bin",
            "models/student_xent_seed0.ckpt",
            "models/student_cat_xent_seed0.ckpt",
            "logs/scores_xent_seed0_average.csv",
            "curves/cat_xent_seed0_sum.csv",
            "results.json",
            "summary.txt",
        ):
            assert (out / rel).exists(), rel

    def test_progress_goes_to_stderr_not_stdout(self, micro_pipeline):
        _, _, procs = micro_pipeline
        for proc in procs:
            assert proc.stdout == ""
            assert "[cascadekit]" in proc.stderr

    def test_results_json_covers_both_students(self, micro_pipeline):
        out, _, _ = micro_pipeline
        results = json.loads((out / "results.json").read_text())
        assert set(results["students"]) == {"xent_seed0", "cat_xent_seed0"}

    def test_eval_cascade_accepts_rule_override(self, micro_pipeline, tmp_path):
        out, cfg, _ = micro_pipeline
        proc = run_cli("eval-cascade", "--config", str(cfg), "--out", str(out),
                       "--rules", "maximum")
        assert proc.returncode == 0
        assert (out / "curves" / "xent_seed0_maximum.csv").exists()


class TestGenData:
    def test_same_invocation_twice_is_byte_identical(self, tmp_path):
        cfg = write_micro_config(tmp_path / "config.json")
        blobs = []
        for name in ("a", "b"):
            out = tmp_path / name
            proc = run_cli("gen-data", "--config", str(cfg), "--out", str(out))
            assert proc.returncode == 0
            blobs.append((out / "data" / "corpus.jsonl").read_bytes())
        assert blobs[0] == blobs[1]

    def test_seed_flag_changes_the_corpus(self, tmp_path):
        cfg = write_micro_config(tmp_path / "config.json")
        blobs = []
        for name, extra in (("a", []), ("b", ["--seed", "123"])):
            out = tmp_path / name
            proc = run_cli("gen-data", "--config", str(cfg), "--out", str(out), *extra)
            assert proc.returncode == 0
            blobs.append((out / "data" / "corpus.jsonl").read_bytes())
        assert blobs[0] != blobs[1]


class TestUsageErrors:
    def test_help_exits_zero(self):
        assert run_cli("--help").returncode == 0

    def test_unknown_subcommand(self):
        assert run_cli("frobnicate").returncode == 1

    def test_unknown_flag(self):
        assert run_cli("gen-data", "--bogus").returncode == 1

    def test_missing_config_file(self, tmp_path):
        proc = run_cli("gen-data", "--config", str(tmp_path / "nope.json"))
        assert proc.returncode == 1
        assert "not found" in proc.stderr

    def test_malformed_config_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        proc = run_cli("gen-data", "--config", str(path), "--out", str(tmp_path / "o"))
        assert proc.returncode == 1
        assert "not valid JSON" in proc.stderr

    def test_unknown_override_path(self, tmp_path):
        proc = run_cli("gen-data", "--override", "typo=1", "--out", str(tmp_path / "o"))
        assert proc.returncode == 1
        assert "typo" in proc.stderr

    def test_override_without_equals(self, tmp_path):
        proc = run_cli("gen-data", "--override", "corpus.noise_rate",
                       "--out", str(tmp_path / "o"))
        assert proc.returncode == 1

    def test_train_small_needs_loss_flag(self, micro_pipeline):
        out, cfg, _ = micro_pipeline
        proc = run_cli("train", "--role", "small",
                       "--config", str(cfg), "--out", str(out))
        assert proc.returncode == 1
        assert "--loss" in proc.stderr

    def test_train_large_rejects_other_losses(self, micro_pipeline):
        out, cfg, _ = micro_pipeline
        proc = run_cli("train", "--role", "large", "--loss", "cat_xent",
                       "--config", str(cfg), "--out", str(out))
        assert proc.returncode == 1

    def test_loss_kind_absent_from_config(self, micro_pipeline):
        out, cfg, _ = micro_pipeline
        proc = run_cli("train", "--role", "small", "--loss", "cat_dist",
                       "--config", str(cfg), "--out", str(out))
        assert proc.returncode == 1

    def test_bad_rule_spelling(self, micro_pipeline):
        out, cfg, _ = micro_pipeline
        proc = run_cli("eval-cascade", "--config", str(cfg), "--out", str(out),
                       "--rules", "avreage")
        assert proc.returncode == 1


class TestRuntimeErrors:
    def test_train_before_gen_data(self, tmp_path):
        cfg = write_micro_config(tmp_path / "config.json")
        proc = run_cli("train", "--role", "large",
                       "--config", str(cfg), "--out", str(tmp_path / "empty"))
        assert proc.returncode == 2

    def test_teacher_dependent_loss_without_teacher(self, tmp_path):
        cfg = write_micro_config(tmp_path / "config.json")
        out = tmp_path / "run"
        assert run_cli("gen-data", "--config", str(cfg),
                       "--out", str(out)).returncode == 0
        proc = run_cli("train", "--role", "small", "--loss", "cat_xent",
                       "--config", str(cfg), "--out", str(out))
        assert proc.returncode == 2
        assert "teacher" in proc.stderr

    def test_sweep_before_teacher_exists(self, tmp_path):
        cfg = write_micro_config(tmp_path / "config.json")
        proc = run_cli("sweep", "--config", str(cfg), "--out", str(tmp_path / "o"))
        assert proc.returncode == 2
        assert "teacher" in proc.stderr

    def test_sweep_without_score_logs(self, tmp_path):
        cfg = write_micro_config(tmp_path / "config.json")
        out = tmp_path / "run"
        for step in (("gen-data",), ("train", "--role", "large")):
            assert run_cli(*step, "--config", str(cfg),
                           "--out", str(out)).returncode == 0
        proc = run_cli("sweep", "--config", str(cfg), "--out", str(out))
        assert proc.returncode == 2
        assert "no score logs" in proc.stderr

    def test_repro_refuses_nonempty_directory(self, tmp_path):
        out = tmp_path / "occupied"
        out.mkdir()
        (out / "keep.txt").write_text("do not clobber")
        cfg = write_micro_config(tmp_path / "config.json")
        proc = run_cli("repro", "--config", str(cfg), "--out", str(out))
        assert proc.returncode == 2
        assert "not empty" in proc.stderr
        assert (out / "keep.txt").read_text() == "do not clobber"
