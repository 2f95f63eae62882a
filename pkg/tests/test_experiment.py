"""Experiment config schema, overrides, run layout, and pipeline stages."""

import json

import pytest

from cascadekit.experiment import (
    ConfigError,
    RunPaths,
    apply_overrides,
    config_from_dict,
    default_config,
    load_config,
    stage_gen_data,
)
from cascadekit.corpus import load_corpus, load_vocab
from cascadekit.trainer import TrainConfig


class TestDefaultConfig:
    def test_validates_cleanly(self):
        cfg = config_from_dict(default_config())
        assert cfg.noise_rate == 0.15
        assert len(cfg.seeds) == 5
        assert len(cfg.task_specs()) == 6

    def test_teacher_trains_twice_as_long_as_students(self):
        cfg = config_from_dict(default_config())
        assert cfg.teacher_train.steps == 2 * cfg.student_train.steps

    def test_returns_fresh_copies(self):
        a = default_config()
        a["corpus"]["noise_rate"] = 0.9
        assert default_config()["corpus"]["noise_rate"] == 0.15

    def test_includes_schema_version(self):
        assert default_config()["schema_version"] == 1

    def test_loss_list_covers_all_eight_kinds(self):
        kinds = {entry["kind"] for entry in default_config()["losses"]}
        assert len(kinds) == 8

    def test_headline_losses_run_all_seeds(self):
        cfg = config_from_dict(default_config())
        for kind in ("xent", "cat_xent", "cat_xent_s"):
            assert cfg.loss_run(kind).seeds == cfg.seeds


class TestConfigValidation:
    def test_unknown_top_key_rejected(self):
        raw = default_config()
        raw["typo"] = 1
        with pytest.raises(ConfigError, match="typo"):
            config_from_dict(raw)

    def test_unknown_nested_key_rejected(self):
        raw = default_config()
        raw["corpus"]["extra"] = 1
        with pytest.raises(ConfigError, match="corpus.*extra"):
            config_from_dict(raw)

    def test_wrong_type_rejected(self):
        raw = default_config()
        raw["corpus"]["train_per_task"] = "many"
        with pytest.raises(ConfigError, match="train_per_task"):
            config_from_dict(raw)

    def test_bool_is_not_a_number(self):
        raw = default_config()
        raw["corpus"]["noise_rate"] = True
        with pytest.raises(ConfigError, match="noise_rate"):
            config_from_dict(raw)

    def test_bad_loss_kind_rejected(self):
        raw = default_config()
        raw["losses"][0]["kind"] = "hinge"
        with pytest.raises(ConfigError):
            config_from_dict(raw)

    def test_empty_seeds_rejected(self):
        raw = default_config()
        raw["seeds"] = []
        with pytest.raises(ConfigError, match="seeds"):
            config_from_dict(raw)

    def test_bad_rule_rejected(self):
        raw = default_config()
        raw["rules"] = ["average", "median"]
        with pytest.raises(ConfigError):
            config_from_dict(raw)

    def test_unknown_schema_version_rejected(self):
        raw = default_config()
        raw["schema_version"] = 99
        with pytest.raises(ConfigError, match="schema_version"):
            config_from_dict(raw)

    def test_loss_run_lookup(self):
        cfg = config_from_dict(default_config())
        assert cfg.loss_run("cat_xent").kind == "cat_xent"
        with pytest.raises(ConfigError, match="hinge"):
            cfg.loss_run("hinge")

    def test_train_config_construction(self):
        cfg = config_from_dict(default_config())
        assert isinstance(cfg.teacher_train, TrainConfig)
        assert cfg.teacher_train.lr_schedule == "cosine_decay"


class TestOverrides:
    def test_scalar_override(self):
        raw = apply_overrides(default_config(), ["corpus.noise_rate=0.3"])
        assert raw["corpus"]["noise_rate"] == 0.3

    def test_json_values_parse(self):
        raw = apply_overrides(default_config(), ['seeds=[1,2]', 'out_dir="x"'])
        assert raw["seeds"] == [1, 2]
        assert raw["out_dir"] == "x"

    def test_bare_strings_pass_through(self):
        raw = apply_overrides(default_config(), ["out_dir=runs/alt"])
        assert raw["out_dir"] == "runs/alt"

    def test_list_index_path(self):
        raw = apply_overrides(default_config(), ["losses.0.kind=dist"])
        assert raw["losses"][0]["kind"] == "dist"

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="nope"):
            apply_overrides(default_config(), ["corpus.nope=1"])

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="KEY=VALUE"):
            apply_overrides(default_config(), ["corpus.noise_rate"])

    def test_load_config_applies_file_then_overrides(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"corpus": {"train_per_task": 10}}))
        cfg, raw = load_config(path, ["corpus.train_per_task=20"], out_dir=None)
        assert cfg.train_per_task == 20

    def test_load_config_out_dir_wins(self, tmp_path):
        cfg, _ = load_config(None, [], out_dir=str(tmp_path / "o"))
        assert cfg.out_dir == str(tmp_path / "o")

    def test_partial_file_merges_over_defaults(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seeds": [7]}))
        cfg, _ = load_config(path, [], out_dir=None)
        assert cfg.seeds == (7,)
        assert cfg.train_per_task == 400

    def test_malformed_config_file_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(path, [], out_dir=None)


class TestRunPaths:
    def test_layout(self, tmp_path):
        paths = RunPaths(root=tmp_path / "run")
        assert paths.corpus_path.parts[-2:] == ("data", "corpus.jsonl")
        assert paths.teacher_ckpt.parts[-2:] == ("models", "teacher.ckpt")
        assert paths.student_ckpt("xent_seed0").name == "student_xent_seed0.ckpt"
        assert paths.score_log("xent_seed0", "average").name == "scores_xent_seed0_average.csv"
        assert paths.curve_csv("xent_seed0", "average").name == "xent_seed0_average.csv"

    def test_ensure_creates_tree(self, tmp_path):
        paths = RunPaths(root=tmp_path / "run")
        paths.ensure()
        for sub in ("data", "models", "cache", "logs", "curves", "plots"):
            assert (tmp_path / "run" / sub).is_dir()


class TestGenDataStage:
    def test_writes_loadable_artifacts(self, tmp_path):
        cfg, _ = load_config(None, ["corpus.train_per_task=5", "corpus.eval_per_task=2"],
                             out_dir=str(tmp_path / "run"))
        paths = RunPaths(root=tmp_path / "run")
        paths.ensure()
        stage_gen_data(cfg, paths)
        vocab = load_vocab(paths.vocab_path)
        examples = load_corpus(paths.corpus_path, vocab)
        assert len(examples) == 6 * 7
        noisy = [e for e in examples if e.noisy]
        assert all(e.split == "train" for e in noisy)
