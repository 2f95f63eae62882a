"""Command-line interface for the cascade experiment pipeline.

Subcommands map onto pipeline stages; one JSON config drives everything and
``--override KEY=VALUE`` patches scalar fields through dotted paths.  All
progress goes to stderr; files land under the output directory; stdout stays
clean.  Exit codes: 0 success, 1 usage or configuration error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import acceptance, experiment
from . import model as model_mod
from .cascade import CascadeError, DeferralRuleSpec
from .corpus import CorpusError
from .evaluation import EvalError
from .experiment import (ConfigError, RunPaths, StageError, eval_split,
                         evaluate_student, load_config, load_run_data, stage,
                         stage_build_cache, stage_eval, stage_gen_data,
                         stage_report, stage_train_student,
                         stage_train_teacher, train_split)
from .losses import LossError
from .model import ModelError
from .trainer import TrainerError, TrainingDivergedError

USAGE_ERRORS = (ConfigError, CascadeError, LossError)
RUNTIME_ERRORS = (StageError, TrainerError, TrainingDivergedError, ModelError,
                  CorpusError, EvalError, OSError)


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on usage errors; remap to the 1 contract."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", default=None,
                   help="JSON config file (built-in defaults when omitted)")
    p.add_argument("--seed", type=int, default=None, metavar="INT",
                   help="override the subcommand's primary seed")
    p.add_argument("--out", metavar="DIR", default=None,
                   help="output directory (overrides the config's out_dir)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path config override, repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cascadekit",
                     description="two-model cascade training and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the corpus and vocab files")
    _add_common(p)

    p = sub.add_parser("train", help="train one model (teacher or student)")
    _add_common(p)
    p.add_argument("--role", choices=("small", "large"), default="small",
                   help="which cascade member to train")
    p.add_argument("--loss", default=None, metavar="KIND",
                   help="loss kind for --role small (must appear in config losses)")

    p = sub.add_parser("cache-teacher", help="precompute teacher outputs on the train split")
    _add_common(p)

    p = sub.add_parser("eval-cascade", help="decode, score, and sweep deferral curves")
    _add_common(p)
    p.add_argument("--checkpoint", default=None, metavar="PATH",
                   help="evaluate one student checkpoint instead of all configured runs")
    p.add_argument("--rules", default=None, metavar="R1,R2",
                   help="comma-separated rule list overriding the config")

    p = sub.add_parser("sweep", help="recompute curves from existing score logs")
    _add_common(p)

    p = sub.add_parser("report", help="render SVG plots and the text summary")
    _add_common(p)

    p = sub.add_parser("repro", help="full pipeline plus acceptance summary")
    _add_common(p)
    return parser


def _load(args, seed_overrides: dict[str, str] | None = None):
    overrides = list(args.override)
    if args.seed is not None and seed_overrides:
        overrides.extend(f"{key}={args.seed + offset}"
                         for key, offset in seed_overrides.items())
    return load_config(args.config, overrides, out_dir=args.out)


def cmd_gen_data(args) -> int:
    cfg, _ = _load(args, {"corpus.base_seed": 0})
    paths = RunPaths(root=Path(cfg.out_dir))
    paths.ensure()
    with stage("gen_data"):
        stage_gen_data(cfg, paths)
    return 0


def cmd_train(args) -> int:
    cfg, _ = _load(args)
    paths = RunPaths(root=Path(cfg.out_dir))
    paths.ensure()
    examples, vocab = load_run_data(paths)
    train_examples = train_split(examples)
    if args.role == "large":
        if args.loss not in (None, "xent"):
            raise ConfigError("--role large trains with plain cross entropy; drop --loss")
        if args.seed is not None:
            cfg = experiment.dc_replace(cfg, teacher_seed=args.seed)
        with stage("train_teacher"):
            stage_train_teacher(cfg, paths, train_examples, vocab)
        return 0
    if args.loss is None:
        raise ConfigError("--role small requires --loss KIND")
    run = cfg.loss_run(args.loss)
    seed = args.seed if args.seed is not None else run.seeds[0]
    from .losses import LossSpec
    spec = LossSpec(kind=run.kind, w=run.w)
    cache = None
    if spec.needs_teacher and not paths.cache_path.exists():
        if not paths.teacher_ckpt.exists():
            raise StageError(f"loss {run.kind!r} needs a teacher; missing checkpoint "
                             f"{paths.teacher_ckpt}")
        with stage("build_cache"):
            cache = stage_build_cache(cfg, paths, train_examples, vocab)
    with stage(f"train_student[{run.label(seed)}]"):
        stage_train_student(cfg, paths, train_examples, vocab, run, seed, cache)
    return 0


def cmd_cache_teacher(args) -> int:
    cfg, _ = _load(args)
    paths = RunPaths(root=Path(cfg.out_dir))
    paths.ensure()
    examples, vocab = load_run_data(paths)
    with stage("build_cache"):
        stage_build_cache(cfg, paths, train_split(examples), vocab)
    return 0


def cmd_eval_cascade(args) -> int:
    overrides = list(args.override)
    cfg, _ = load_config(args.config, overrides, out_dir=args.out)
    if args.rules is not None:
        rules = tuple(DeferralRuleSpec.parse(t) for t in args.rules.split(","))
        cfg = experiment.dc_replace(cfg, rules=rules)
    paths = RunPaths(root=Path(cfg.out_dir))
    paths.ensure()
    examples, vocab = load_run_data(paths)
    if args.checkpoint is not None:
        if not paths.teacher_ckpt.exists():
            raise StageError(f"missing teacher checkpoint {paths.teacher_ckpt}")
        teacher = model_mod.load_model(paths.teacher_ckpt)
        student = model_mod.load_model(args.checkpoint)
        label = Path(args.checkpoint).stem.removeprefix("student_")
        with stage(f"eval[{label}]"):
            entry = evaluate_student(cfg, paths, label, student, teacher, examples, vocab)
        for rule_label, value in sorted(entry["audc"].items()):
            print(f"[cascadekit]   audc {label} {rule_label}: {value:.6f}",
                  file=sys.stderr)
        return 0
    if args.seed is not None:
        losses = tuple(experiment.dc_replace(run, seeds=(args.seed,))
                       for run in cfg.losses if args.seed in run.seeds)
        if not losses:
            raise ConfigError(f"--seed {args.seed} matches no configured loss run")
        cfg = experiment.dc_replace(cfg, losses=losses)
    with stage("eval"):
        stage_eval(cfg, paths, examples, vocab)
    with stage("report"):
        stage_report(cfg, paths)
    return 0


def cmd_sweep(args) -> int:
    from .cascade import read_score_log
    from .evaluation import audc as audc_fn
    from .evaluation import sweep as sweep_fn
    from .evaluation import write_curve_csv

    cfg, _ = _load(args)
    paths = RunPaths(root=Path(cfg.out_dir))
    if not paths.teacher_ckpt.exists():
        raise StageError(f"missing teacher checkpoint {paths.teacher_ckpt}")
    cost_large = 2.0 * model_mod.load_model(paths.teacher_ckpt).param_count
    done = 0
    with stage("sweep"):
        for run in cfg.losses:
            for seed in run.seeds:
                label = run.label(seed)
                ckpt = paths.student_ckpt(label)
                if not ckpt.exists():
                    continue
                cost_small = 2.0 * model_mod.load_model(ckpt).param_count
                for rule in cfg.rules:
                    log_path = paths.score_log(label, rule.label())
                    if not log_path.exists():
                        continue
                    rows = read_score_log(log_path)
                    points = sweep_fn(rows, cost_small, cost_large, str(rule), label)
                    write_curve_csv(points, paths.curve_csv(label, rule.label()))
                    print(f"[cascadekit]   {label} {rule}: audc {audc_fn(points):.6f}",
                          file=sys.stderr)
                    done += 1
    if done == 0:
        raise StageError("no score logs found; run eval-cascade first")
    return 0


def cmd_report(args) -> int:
    cfg, _ = _load(args)
    paths = RunPaths(root=Path(cfg.out_dir))
    paths.ensure()
    with stage("report"):
        stage_report(cfg, paths)
    return 0


def cmd_repro(args) -> int:
    cfg, _ = _load(args)
    paths = RunPaths(root=Path(cfg.out_dir))
    experiment.run_pipeline(cfg)
    with stage("acceptance_summary"):
        summary = acceptance.write_acceptance_summary(cfg, paths)
    for check in summary["checks"]:
        state = {True: "pass", False: "FAIL", None: "n/a"}[check["pass"]]
        print(f"[cascadekit]   {check['order']:>2d} {check['name']}: {state}",
              file=sys.stderr)
    print(f"[cascadekit] all_pass: {summary['all_pass']}", file=sys.stderr)
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "cache-teacher": cmd_cache_teacher,
    "eval-cascade": cmd_eval_cascade,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "repro": cmd_repro,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except USAGE_ERRORS as exc:
        print(f"cascadekit: config error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"cascadekit: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
