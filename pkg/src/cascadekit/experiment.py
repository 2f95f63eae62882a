"""Experiment pipeline: config schema, run layout, and end-to-end stages.

One JSON config drives everything.  A run directory is populated in fixed
stages (data, teacher, cache, students, eval, report); each stage is a pure
function of the config plus earlier artifacts, so reruns with the same config
reproduce every CSV, checkpoint, and summary byte for byte.  Wall-clock
timings go only to ``timings.json`` and stderr, never into result files.
"""

from __future__ import annotations

import json
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as model_mod
from .cascade import (CascadeError, DeferralRuleSpec, ScoreRow, deferral_score,
                      model_cost, router_features, router_labels, train_router,
                      write_score_log)
from .corpus import (Example, Vocab, default_task_specs, default_vocab,
                     generate_corpus, inject_label_noise, load_corpus,
                     load_vocab, save_corpus, save_vocab)
from .evaluation import (audc, dataset_xent, example_quality, exact_match,
                         next_token_acc, render_curves_svg, sweep,
                         write_curve_csv)
from .losses import LOSS_KINDS, LossSpec
from .trainer import (TeacherCache, TrainConfig, build_teacher_cache,
                      load_teacher_cache, save_teacher_cache, train)

SCHEMA_VERSION = 1
ROUTER_TRAIN_SEED = 4242


class ConfigError(ValueError):
    """Schema violation; the message names the offending field."""


class StageError(RuntimeError):
    """Pipeline failure; the message names the failing stage."""


# ---------------------------------------------------------------------------
# config schema


def default_config() -> dict:
    """Fresh copy of the default experiment configuration."""
    return json.loads(json.dumps(_DEFAULT_CONFIG))


_DEFAULT_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "out_dir": "runs/default",
    "corpus": {
        "noise_rate": 0.15,
        "base_seed": 7000,
        "noise_seed": 9000,
        "train_per_task": 400,
        "eval_per_task": 80,
    },
    "small_model": {"n_layers": 2, "d_model": 64, "n_heads": 4, "d_ff": 256, "init_seed": 100},
    "large_model": {"n_layers": 4, "d_model": 160, "n_heads": 4, "d_ff": 640, "init_seed": 200},
    "max_seq_len": 32,
    "max_new_tokens": 12,
    "teacher_train": {
        "steps": 6000, "batch_size": 16, "lr": 0.001,
        "optimizer": "adaptive_elementwise", "lr_schedule": "cosine_decay",
    },
    "teacher_seed": 500,
    "student_train": {
        "steps": 3000, "batch_size": 8, "lr": 0.003,
        "optimizer": "adaptive_elementwise", "lr_schedule": "cosine_decay",
    },
    "seeds": [0, 1, 2, 3, 4],
    "losses": [
        {"kind": "xent"},
        {"kind": "cat_xent"},
        {"kind": "cat_xent_s"},
        {"kind": "dist", "w": 0.5, "seeds": [0]},
        {"kind": "cat_dist", "w": 0.5, "seeds": [0]},
        {"kind": "cat_xent_l", "seeds": [0]},
        {"kind": "cat_dist_l", "w": 0.5, "seeds": [0]},
        {"kind": "cat_dist_s", "w": 0.5, "seeds": [0]},
    ],
    "rules": ["average", "sum", "maximum", "minimum", "quantile:0.4", "quantile:0.8"],
    "eval_batch_size": 64,
}

_MODEL_KEYS = {"n_layers", "d_model", "n_heads", "d_ff", "init_seed"}
_TRAIN_KEYS = {"steps", "batch_size", "lr", "optimizer", "lr_schedule"}
_CORPUS_KEYS = {"noise_rate", "base_seed", "noise_seed", "train_per_task", "eval_per_task"}
_TOP_KEYS = {"schema_version", "out_dir", "corpus", "small_model", "large_model",
             "max_seq_len", "max_new_tokens", "teacher_train", "teacher_seed",
             "student_train", "seeds", "losses", "rules", "eval_batch_size"}
_LOSS_KEYS = {"kind", "w", "seeds", "train"}


def _need_int(d: dict, key: str, path: str, lo: int | None = None) -> int:
    v = d.get(key)
    if not isinstance(v, int) or isinstance(v, bool):
        raise ConfigError(f"{path}.{key}: expected an integer")
    if lo is not None and v < lo:
        raise ConfigError(f"{path}.{key}: must be >= {lo}")
    return v


def _need_number(d: dict, key: str, path: str) -> float:
    v = d.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}: expected a number")
    return float(v)


def _need_section(cfg: dict, key: str, allowed: set[str]) -> dict:
    v = cfg.get(key)
    if not isinstance(v, dict):
        raise ConfigError(f"{key}: expected an object")
    unknown = set(v) - allowed
    if unknown:
        raise ConfigError(f"{key}: unknown field {sorted(unknown)[0]!r}")
    return v


@dataclass(frozen=True)
class LossRun:
    """One training configuration: a loss kind, its seeds, and train overrides."""

    kind: str
    w: float
    seeds: tuple[int, ...]
    train: TrainConfig

    def label(self, seed: int) -> str:
        return f"{self.kind}_seed{seed}"


@dataclass(frozen=True)
class ExperimentConfig:
    out_dir: str
    noise_rate: float
    corpus_base_seed: int
    corpus_noise_seed: int
    train_per_task: int
    eval_per_task: int
    small_model: model_mod.ModelConfig
    large_model: model_mod.ModelConfig
    teacher_train: TrainConfig
    teacher_seed: int
    student_train: TrainConfig
    seeds: tuple[int, ...]
    losses: tuple[LossRun, ...]
    rules: tuple[DeferralRuleSpec, ...]
    max_new_tokens: int
    eval_batch_size: int

    def loss_run(self, kind: str) -> LossRun:
        for run in self.losses:
            if run.kind == kind:
                return run
        raise ConfigError(f"losses: no run with kind {kind!r}")

    def task_specs(self):
        return default_task_specs(noise_rate=self.noise_rate, base_seed=self.corpus_base_seed)


def _train_config(block: dict, path: str) -> TrainConfig:
    unknown = set(block) - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown field {sorted(unknown)[0]!r}")
    try:
        return TrainConfig(
            steps=_need_int(block, "steps", path, lo=1),
            batch_size=_need_int(block, "batch_size", path, lo=1),
            lr=_need_number(block, "lr", path),
            optimizer=block.get("optimizer", "adaptive_elementwise"),
            lr_schedule=block.get("lr_schedule", "cosine_decay"),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a config dict; error messages carry dotted field paths."""
    if not isinstance(raw, dict):
        raise ConfigError("config root: expected an object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"config root: unknown field {sorted(unknown)[0]!r}")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, "
                          f"got {raw.get('schema_version')!r}")
    out_dir = raw.get("out_dir")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("out_dir: expected a non-empty string")

    corpus = _need_section(raw, "corpus", _CORPUS_KEYS)
    noise_rate = _need_number(corpus, "noise_rate", "corpus")
    if not 0.0 <= noise_rate <= 1.0:
        raise ConfigError("corpus.noise_rate: must be in [0, 1]")

    vocab = default_vocab()
    max_seq_len = _need_int(raw, "max_seq_len", "config", lo=3)
    models = {}
    for key in ("small_model", "large_model"):
        block = _need_section(raw, key, _MODEL_KEYS)
        try:
            models[key] = model_mod.ModelConfig(
                n_layers=_need_int(block, "n_layers", key, lo=1),
                d_model=_need_int(block, "d_model", key, lo=4),
                n_heads=_need_int(block, "n_heads", key, lo=1),
                d_ff=_need_int(block, "d_ff", key, lo=4),
                vocab_size=vocab.size,
                max_seq_len=max_seq_len,
                init_seed=_need_int(block, "init_seed", key),
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc

    teacher_train = _train_config(_need_section(raw, "teacher_train", _TRAIN_KEYS),
                                  "teacher_train")
    student_train = _train_config(_need_section(raw, "student_train", _TRAIN_KEYS),
                                  "student_train")

    seeds = raw.get("seeds")
    if (not isinstance(seeds, list) or not seeds
            or any(isinstance(s, bool) or not isinstance(s, int) for s in seeds)):
        raise ConfigError("seeds: expected a non-empty list of integers")

    losses_raw = raw.get("losses")
    if not isinstance(losses_raw, list) or not losses_raw:
        raise ConfigError("losses: expected a non-empty list")
    losses = []
    seen_kinds = set()
    for i, block in enumerate(losses_raw):
        path = f"losses[{i}]"
        if not isinstance(block, dict):
            raise ConfigError(f"{path}: expected an object")
        unknown = set(block) - _LOSS_KEYS
        if unknown:
            raise ConfigError(f"{path}: unknown field {sorted(unknown)[0]!r}")
        kind = block.get("kind")
        if kind not in LOSS_KINDS:
            raise ConfigError(f"{path}.kind: expected one of {sorted(LOSS_KINDS)}, got {kind!r}")
        if kind in seen_kinds:
            raise ConfigError(f"{path}.kind: duplicate loss kind {kind!r}")
        seen_kinds.add(kind)
        w = block.get("w", 0.5)
        if isinstance(w, bool) or not isinstance(w, (int, float)) or not 0.0 <= w <= 1.0:
            raise ConfigError(f"{path}.w: expected a number in [0, 1]")
        run_seeds = block.get("seeds", seeds)
        if (not isinstance(run_seeds, list) or not run_seeds
                or any(isinstance(s, bool) or not isinstance(s, int) for s in run_seeds)):
            raise ConfigError(f"{path}.seeds: expected a non-empty list of integers")
        train_block = dict(raw["student_train"])
        train_block.update(block.get("train", {}))
        losses.append(LossRun(kind=kind, w=float(w), seeds=tuple(run_seeds),
                              train=_train_config(train_block, f"{path}.train")))

    rules_raw = raw.get("rules")
    if not isinstance(rules_raw, list) or not rules_raw:
        raise ConfigError("rules: expected a non-empty list")
    rules = []
    for i, text in enumerate(rules_raw):
        if not isinstance(text, str):
            raise ConfigError(f"rules[{i}]: expected a string")
        try:
            rules.append(DeferralRuleSpec.parse(text))
        except CascadeError as exc:
            raise ConfigError(f"rules[{i}]: {exc}") from exc

    return ExperimentConfig(
        out_dir=out_dir,
        noise_rate=noise_rate,
        corpus_base_seed=_need_int(corpus, "base_seed", "corpus"),
        corpus_noise_seed=_need_int(corpus, "noise_seed", "corpus"),
        train_per_task=_need_int(corpus, "train_per_task", "corpus", lo=1),
        eval_per_task=_need_int(corpus, "eval_per_task", "corpus", lo=1),
        small_model=models["small_model"],
        large_model=models["large_model"],
        teacher_train=teacher_train,
        teacher_seed=_need_int(raw, "teacher_seed", "config"),
        student_train=student_train,
        seeds=tuple(seeds),
        losses=tuple(losses),
        rules=tuple(rules),
        max_new_tokens=_need_int(raw, "max_new_tokens", "config", lo=1),
        eval_batch_size=_need_int(raw, "eval_batch_size", "config", lo=1),
    )


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``a.b.c=value`` overrides in place; values parse as JSON or string.

    Paths must name existing keys, so typos fail loudly instead of creating
    dead configuration.
    """
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r}: expected KEY=VALUE")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            step = _index_or_key(node, part, key)
            node = step
        last = parts[-1]
        if isinstance(node, list):
            idx = _list_index(node, last, key)
            node[idx] = value
        elif isinstance(node, dict):
            if last not in node:
                raise ConfigError(f"override {key!r}: unknown key {last!r}")
            node[last] = value
        else:
            raise ConfigError(f"override {key!r}: {last!r} has no parent section")
    return raw


def _index_or_key(node, part: str, full_key: str):
    if isinstance(node, list):
        return node[_list_index(node, part, full_key)]
    if isinstance(node, dict):
        if part not in node:
            raise ConfigError(f"override {full_key!r}: unknown section {part!r}")
        return node[part]
    raise ConfigError(f"override {full_key!r}: {part!r} is not inside a section")


def _list_index(node: list, part: str, full_key: str) -> int:
    try:
        idx = int(part)
    except ValueError:
        raise ConfigError(f"override {full_key!r}: {part!r} is not a list index") from None
    if not 0 <= idx < len(node):
        raise ConfigError(f"override {full_key!r}: index {idx} out of range")
    return idx


def _merge_over(base: dict, update: dict) -> dict:
    """Overlay ``update`` onto ``base``: dicts merge key-wise, all else replaces."""
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge_over(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path: str | Path | None, overrides: Sequence[str] = (),
                out_dir: str | None = None) -> tuple[ExperimentConfig, dict]:
    """Config object plus its raw dict, from a file or the built-in default.

    A config file may be partial: its fields overlay the defaults, so a
    two-line file can shrink the corpus without restating the model blocks.
    """
    raw = default_config()
    if path is not None:
        try:
            update = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(update, dict):
            raise ConfigError(f"config file {path}: expected a JSON object")
        raw = _merge_over(raw, update)
    apply_overrides(raw, overrides)
    if out_dir is not None:
        raw["out_dir"] = out_dir
    return config_from_dict(raw), raw


# ---------------------------------------------------------------------------
# run directory layout


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def corpus_path(self) -> Path:
        return self.root / "data" / "corpus.jsonl"

    @property
    def vocab_path(self) -> Path:
        return self.root / "data" / "vocab.json"

    @property
    def teacher_ckpt(self) -> Path:
        return self.root / "models" / "teacher.ckpt"

    @property
    def cache_path(self) -> Path:
        return self.root / "cache" / "teacher_train.bin"

    def student_ckpt(self, label: str) -> Path:
        return self.root / "models" / f"student_{label}.ckpt"

    def train_log(self, name: str) -> Path:
        return self.root / "logs" / f"train_{name}.csv"

    def score_log(self, label: str, rule_label: str) -> Path:
        return self.root / "logs" / f"scores_{label}_{rule_label}.csv"

    def curve_csv(self, label: str, rule_label: str) -> Path:
        return self.root / "curves" / f"{label}_{rule_label}.csv"

    @property
    def plots_dir(self) -> Path:
        return self.root / "plots"

    @property
    def results_path(self) -> Path:
        return self.root / "results.json"

    @property
    def report_path(self) -> Path:
        return self.root / "summary.txt"

    @property
    def acceptance_path(self) -> Path:
        return self.root / "acceptance_summary.json"

    @property
    def timings_path(self) -> Path:
        return self.root / "timings.json"

    def ensure(self) -> None:
        for sub in ("data", "models", "cache", "logs", "curves", "plots"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)


@contextmanager
def stage(name: str):
    """Wrap a pipeline stage so failures carry the stage name."""
    t0 = time.perf_counter()
    _log(f"stage {name}: start")
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(f"stage {name} failed: {exc}") from exc
    _log(f"stage {name}: done in {time.perf_counter() - t0:.1f}s")


def _log(msg: str) -> None:
    print(f"[cascadekit] {msg}", file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# pipeline stages


def stage_gen_data(cfg: ExperimentConfig, paths: RunPaths) -> tuple[list[Example], Vocab]:
    specs = cfg.task_specs()
    vocab = default_vocab()
    clean = generate_corpus(specs, {"train": cfg.train_per_task, "eval": cfg.eval_per_task},
                            vocab)
    examples = inject_label_noise(clean, cfg.noise_rate, cfg.corpus_noise_seed, specs, vocab)
    save_corpus(examples, paths.corpus_path)
    save_vocab(vocab, paths.vocab_path)
    for spec in specs:
        n_train = sum(1 for e in examples if e.task_id == spec.task_id and e.split == "train")
        n_eval = sum(1 for e in examples if e.task_id == spec.task_id and e.split == "eval")
        n_noisy = sum(1 for e in examples if e.task_id == spec.task_id and e.noisy)
        _log(f"  {spec.task_id}: {n_train} train ({n_noisy} noisy), {n_eval} eval")
    return examples, vocab


def load_run_data(paths: RunPaths) -> tuple[list[Example], Vocab]:
    if not paths.corpus_path.exists():
        raise StageError(f"missing corpus file {paths.corpus_path}; run gen-data first")
    vocab = load_vocab(paths.vocab_path)
    return load_corpus(paths.corpus_path, vocab), vocab


def train_split(examples: Sequence[Example]) -> list[Example]:
    return [e for e in examples if e.split == "train"]


def eval_split(examples: Sequence[Example]) -> list[Example]:
    return [e for e in examples if e.split == "eval"]


def stage_train_teacher(cfg: ExperimentConfig, paths: RunPaths,
                        train_examples: Sequence[Example], vocab: Vocab) -> model_mod.Model:
    start = model_mod.init_model(cfg.large_model)
    result = train(start, train_examples, LossSpec(kind="xent"), cfg.teacher_train,
                   vocab, cfg.teacher_seed, log_path=paths.train_log("teacher"))
    model_mod.save_model(result.model, paths.teacher_ckpt)
    _log(f"  teacher final loss {result.final_loss:.4f}")
    return result.model


def stage_build_cache(cfg: ExperimentConfig, paths: RunPaths,
                      train_examples: Sequence[Example], vocab: Vocab,
                      teacher: model_mod.Model | None = None) -> TeacherCache:
    if teacher is None:
        if not paths.teacher_ckpt.exists():
            raise StageError(f"missing teacher checkpoint {paths.teacher_ckpt}; "
                             "train the large model first")
        teacher = model_mod.load_model(paths.teacher_ckpt)
    cache = build_teacher_cache(teacher, train_examples, vocab, cfg.eval_batch_size)
    save_teacher_cache(cache, paths.cache_path)
    return cache


def stage_train_student(cfg: ExperimentConfig, paths: RunPaths,
                        train_examples: Sequence[Example], vocab: Vocab,
                        run: LossRun, seed: int,
                        cache: TeacherCache | None = None) -> model_mod.Model:
    spec = LossSpec(kind=run.kind, w=run.w)
    if spec.needs_teacher and cache is None:
        if not paths.cache_path.exists():
            raise StageError(f"loss {run.kind!r} needs the teacher cache "
                             f"{paths.cache_path}; run cache-teacher first")
        cache = load_teacher_cache(paths.cache_path)
    label = run.label(seed)
    start = model_mod.init_model(
        dc_replace(cfg.small_model, init_seed=cfg.small_model.init_seed + seed))
    result = train(start, train_examples, spec, run.train, vocab, seed,
                   teacher_cache=cache if spec.needs_teacher else None,
                   log_path=paths.train_log(label))
    model_mod.save_model(result.model, paths.student_ckpt(label))
    _log(f"  student {label} final loss {result.final_loss:.4f}")
    return result.model


# ---------------------------------------------------------------------------
# evaluation stage


def decode_all(model: model_mod.Model, xs: Sequence[Sequence[int]], vocab: Vocab,
               max_new_tokens: int, batch_size: int) -> list[model_mod.DecodeResult]:
    out: list[model_mod.DecodeResult] = []
    for start in range(0, len(xs), batch_size):
        out.extend(model_mod.greedy_decode_batch(
            model, xs[start:start + batch_size], max_new_tokens,
            vocab.bos_id, vocab.sep_id, vocab.pad_id, vocab.eos_id))
    return out


def _decode_measurements(decodes, eval_examples, families, vocab):
    """Per-example (quality, correct) for one model's decodes."""
    quality = np.empty(len(decodes))
    correct = np.empty(len(decodes), dtype=bool)
    for i, (dec, ex) in enumerate(zip(decodes, eval_examples)):
        quality[i] = example_quality(families[ex.task_id], dec.y_hat, ex.y, vocab.eos_id)
        correct[i] = exact_match(dec.y_hat, ex.y, vocab.eos_id)
    return quality, correct


def _learned_router(cfg: ExperimentConfig, student, teacher, train_examples, vocab, families):
    """Fit a router on train-split decodes of both models."""
    xs = [e.x for e in train_examples]
    s_dec = decode_all(student, xs, vocab, cfg.max_new_tokens, cfg.eval_batch_size)
    l_dec = decode_all(teacher, xs, vocab, cfg.max_new_tokens, cfg.eval_batch_size)
    s_ok = np.array([exact_match(d.y_hat, e.y, vocab.eos_id)
                     for d, e in zip(s_dec, train_examples)])
    l_ok = np.array([exact_match(d.y_hat, e.y, vocab.eos_id)
                     for d, e in zip(l_dec, train_examples)])
    feats = np.stack([router_features(d.token_logprobs) for d in s_dec])
    return train_router(feats, router_labels(s_ok, l_ok), seed=ROUTER_TRAIN_SEED)


def evaluate_student(cfg: ExperimentConfig, paths: RunPaths, label: str,
                     student: model_mod.Model, teacher: model_mod.Model,
                     examples: Sequence[Example], vocab: Vocab,
                     large_measurements=None) -> dict:
    """Score log + curve per rule for one student; returns its results entry.

    ``large_measurements`` caches the teacher's decode qualities so a batch
    of students shares one teacher decode pass.
    """
    families = {s.task_id: s.family for s in cfg.task_specs()}
    eval_examples = eval_split(examples)
    if not eval_examples:
        raise StageError("corpus has no eval split")
    xs = [e.x for e in eval_examples]
    if large_measurements is None:
        l_dec = decode_all(teacher, xs, vocab, cfg.max_new_tokens, cfg.eval_batch_size)
        large_measurements = _decode_measurements(l_dec, eval_examples, families, vocab)
    large_quality, large_correct = large_measurements

    s_dec = decode_all(student, xs, vocab, cfg.max_new_tokens, cfg.eval_batch_size)
    small_quality, small_correct = _decode_measurements(s_dec, eval_examples, families, vocab)
    cost_s, cost_l = model_cost(student), model_cost(teacher)

    entry = {
        "checksum": model_mod.model_checksum(student),
        "param_count": student.param_count,
        "eval_xent": dataset_xent(student, eval_examples, vocab, cfg.eval_batch_size),
        "next_token_acc": next_token_acc(student, eval_examples, vocab, cfg.eval_batch_size),
        "exact_match_rate": float(small_correct.mean()),
        "mean_quality": float(small_quality.mean()),
        "audc": {},
    }
    router = None
    for rule in cfg.rules:
        if rule.name == "learned_router":
            if router is None:
                router = _learned_router(cfg, student, teacher,
                                         train_split(examples), vocab, families)
            feats = np.stack([router_features(d.token_logprobs) for d in s_dec])
            scores = router.score(feats)
        else:
            scores = np.array([deferral_score(d.token_logprobs, rule) for d in s_dec])
        rows = [ScoreRow(example_id=f"{ex.task_id}/{i}", score=float(scores[i]),
                         small_correct=bool(small_correct[i]),
                         large_correct=bool(large_correct[i]),
                         small_quality=float(small_quality[i]),
                         large_quality=float(large_quality[i]),
                         n_tokens=len(s_dec[i].y_hat))
                for i, ex in enumerate(eval_examples)]
        write_score_log(rows, paths.score_log(label, rule.label()))
        points = sweep(rows, cost_s, cost_l, rule_label=str(rule), loss_label=label)
        write_curve_csv(points, paths.curve_csv(label, rule.label()))
        entry["audc"][str(rule)] = audc(points)
    return entry


def stage_eval(cfg: ExperimentConfig, paths: RunPaths, examples: Sequence[Example],
               vocab: Vocab, students: dict[str, model_mod.Model] | None = None,
               teacher: model_mod.Model | None = None) -> dict:
    """Evaluate every configured student; writes results.json."""
    if teacher is None:
        if not paths.teacher_ckpt.exists():
            raise StageError(f"missing teacher checkpoint {paths.teacher_ckpt}")
        teacher = model_mod.load_model(paths.teacher_ckpt)
    families = {s.task_id: s.family for s in cfg.task_specs()}
    eval_examples = eval_split(examples)
    xs = [e.x for e in eval_examples]
    l_dec = decode_all(teacher, xs, vocab, cfg.max_new_tokens, cfg.eval_batch_size)
    large_measurements = _decode_measurements(l_dec, eval_examples, families, vocab)

    results = {
        "schema_version": SCHEMA_VERSION,
        "teacher": {
            "checksum": model_mod.model_checksum(teacher),
            "param_count": teacher.param_count,
            "eval_xent": dataset_xent(teacher, eval_examples, vocab, cfg.eval_batch_size),
            "next_token_acc": next_token_acc(teacher, eval_examples, vocab,
                                             cfg.eval_batch_size),
            "exact_match_rate": float(large_measurements[1].mean()),
            "mean_quality": float(large_measurements[0].mean()),
        },
        "students": {},
    }
    for run in cfg.losses:
        for seed in run.seeds:
            label = run.label(seed)
            if students is not None and label in students:
                student = students[label]
            else:
                ckpt = paths.student_ckpt(label)
                if not ckpt.exists():
                    raise StageError(f"missing student checkpoint {ckpt}")
                student = model_mod.load_model(ckpt)
            entry = evaluate_student(cfg, paths, label, student, teacher,
                                     examples, vocab, large_measurements)
            entry.update(kind=run.kind, seed=seed)
            results["students"][label] = entry
            _log(f"  eval {label}: quality {entry['mean_quality']:.4f}, "
                 f"exact match {entry['exact_match_rate']:.4f}")
    paths.results_path.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return results


# ---------------------------------------------------------------------------
# report stage


def stage_report(cfg: ExperimentConfig, paths: RunPaths) -> None:
    """Render SVG deferral curves and a text AUDC table from emitted artifacts."""
    from .evaluation import read_curve_csv

    if not paths.results_path.exists():
        raise StageError(f"missing {paths.results_path}; run eval-cascade first")
    results = json.loads(paths.results_path.read_text())
    first_rule = cfg.rules[0]
    series_q, series_c = [], []
    for run in cfg.losses:
        label = run.label(run.seeds[0])
        path = paths.curve_csv(label, first_rule.label())
        if not path.exists():
            continue
        points = read_curve_csv(path)
        rates = [p.deferral_rate for p in points]
        series_q.append((label, rates, [p.quality for p in points]))
        series_c.append((label, [p.mean_cost for p in points], [p.quality for p in points]))
    if series_q:
        render_curves_svg(series_q, paths.plots_dir / "quality_vs_rate.svg",
                          f"Cascade quality vs deferral rate ({first_rule})",
                          "deferral rate", "quality")
        render_curves_svg(series_c, paths.plots_dir / "quality_vs_cost.svg",
                          f"Cascade quality vs mean cost ({first_rule})",
                          "mean cost (FLOPs proxy)", "quality")

    rule_loss = next((r for r in cfg.losses if r.kind == "cat_xent"), cfg.losses[0])
    rule_label_run = rule_loss.label(rule_loss.seeds[0])
    series_r = []
    for rule in cfg.rules:
        path = paths.curve_csv(rule_label_run, rule.label())
        if not path.exists():
            continue
        points = read_curve_csv(path)
        series_r.append((str(rule), [p.deferral_rate for p in points],
                         [p.quality for p in points]))
    if series_r:
        render_curves_svg(series_r, paths.plots_dir / f"rules_{rule_label_run}.svg",
                          f"Deferral rules compared ({rule_label_run})",
                          "deferral rate", "quality")

    lines = ["cascade evaluation summary", "=" * 60, ""]
    teacher = results["teacher"]
    lines.append(f"teacher: {teacher['param_count']} params, "
                 f"quality {teacher['mean_quality']:.4f}, "
                 f"exact match {teacher['exact_match_rate']:.4f}, "
                 f"eval xent {teacher['eval_xent']:.4f}")
    lines.append("")
    lines.append(f"{'student':24s} {'quality':>8s} {'exact':>8s} {'xent':>8s}  audc by rule")
    for label in sorted(results["students"]):
        s = results["students"][label]
        audc_txt = "  ".join(f"{rule}={value:.4f}"
                             for rule, value in sorted(s["audc"].items()))
        lines.append(f"{label:24s} {s['mean_quality']:8.4f} {s['exact_match_rate']:8.4f} "
                     f"{s['eval_xent']:8.4f}  {audc_txt}")
    lines.append("")
    paths.report_path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# full reproduction run


def run_pipeline(cfg: ExperimentConfig) -> dict:
    """Execute every stage in order; returns the results dict."""
    paths = RunPaths(root=Path(cfg.out_dir))
    root = paths.root
    if root.exists() and any(root.iterdir()):
        raise StageError(f"output directory {root} is not empty; "
                         "pass a fresh --out directory")
    paths.ensure()
    timings: dict[str, float] = {}

    def timed(name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        with stage(name):
            out = fn(*args, **kwargs)
        timings[name] = round(time.perf_counter() - t0, 3)
        return out

    examples, vocab = timed("gen_data", stage_gen_data, cfg, paths)
    train_examples = train_split(examples)
    teacher = timed("train_teacher", stage_train_teacher, cfg, paths, train_examples, vocab)
    cache = timed("build_cache", stage_build_cache, cfg, paths, train_examples, vocab, teacher)
    students: dict[str, model_mod.Model] = {}
    for run in cfg.losses:
        for seed in run.seeds:
            label = run.label(seed)
            students[label] = timed(f"train_student[{label}]", stage_train_student,
                                    cfg, paths, train_examples, vocab, run, seed, cache)
    results = timed("eval", stage_eval, cfg, paths, examples, vocab, students, teacher)
    timed("report", stage_report, cfg, paths)
    timings["total"] = round(sum(timings.values()), 3)
    paths.timings_path.write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return results
