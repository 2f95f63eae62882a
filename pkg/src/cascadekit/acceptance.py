"""Built-in acceptance checks written into every reproduction run.

Ten checks cover the toolkit's contract: five are fast property suites run
in-process (loss identities, gradient correctness, masking semantics, sweep
identities, BLEU cross-check) and four are trend checks computed from the
run's emitted artifacts.  The last check recomputes every curve from its
score log and verifies the bytes, and records a checksum manifest so two
runs with identical config can be diffed.

The summary is machine-readable JSON with one entry per check, each carrying
``pass`` (true/false, or null when the run lacks the needed artifacts) and
enough detail to audit the decision.  Nothing time-dependent is written, so
the summary itself is byte-stable across identical runs.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np

from . import model as model_mod
from .bleu_reference import bleu_reference
from .cascade import read_score_log
from .evaluation import audc, bleu, curve_csv_text, read_curve_csv, sweep, value_at_rate
from .experiment import ExperimentConfig, RunPaths
from .losses import LOSS_KINDS, LossSpec, batch_loss_and_grad, compute_alpha, \
    sequence_dist, sequence_xent

MATCHED_RATES = tuple(round(0.1 * i, 1) for i in range(1, 10))


def _required(n_seeds: int, fraction: float) -> int:
    """Seed-count threshold scaled to the run (4/5 and 3/5 at five seeds)."""
    return max(1, math.ceil(fraction * n_seeds))


def _boost_to(logprobs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Renormalized copy whose row-wise argmax equals ``targets``."""
    raw = logprobs.copy()
    raw[np.arange(len(targets)), targets] = raw.max(axis=1) + 1.0
    return model_mod._log_softmax(raw)


# ---------------------------------------------------------------------------
# property checks (no artifacts needed)


def check_loss_identities(n_instances: int = 100, seed: int = 2024) -> dict:
    """Algebraic identities tying the loss family together.

    With w=1 the distillation blend collapses to cross entropy; with the
    mask forced to all-ones the masked losses equal their unmasked bases;
    masked cross entropy equals masked distillation at w=1.
    """
    rng = np.random.default_rng(seed)
    v = 12
    max_dev = 0.0
    for _ in range(n_instances):
        k = int(rng.integers(1, 7))
        logp = model_mod._log_softmax(rng.normal(0.0, 1.0, (k, v)))
        targets = rng.integers(0, v, k)
        teacher_lp = model_mod._log_softmax(rng.normal(0.0, 1.0, (k, v)))
        teacher_am = np.argmax(teacher_lp, axis=1)
        student_am = np.argmax(logp, axis=1)
        w = float(rng.uniform())

        dev = abs(sequence_dist(logp, targets, teacher_lp, 1.0)
                  - sequence_xent(logp, targets))
        loss_d, rows_d, _ = batch_loss_and_grad(LossSpec("dist", 1.0), logp, targets,
                                                student_am, teacher_am, teacher_lp)
        loss_x, rows_x, _ = batch_loss_and_grad(LossSpec("xent"), logp, targets,
                                                student_am, teacher_am, teacher_lp)
        dev = max(dev, abs(loss_d - loss_x), float(np.abs(rows_d - rows_x).max()))

        # all-ones mask: targets equal the student argmax, teacher boosted to agree
        t_match = student_am.copy()
        lp_match = _boost_to(teacher_lp, t_match)
        am_match = np.argmax(lp_match, axis=1)
        for kind, base in (("cat_xent", "xent"), ("cat_dist", "dist")):
            lm, rm, alpha = batch_loss_and_grad(LossSpec(kind, w), logp, t_match,
                                                student_am, am_match, lp_match)
            lb, rb, _ = batch_loss_and_grad(LossSpec(base, w), logp, t_match,
                                            student_am, am_match, lp_match)
            assert alpha.min() == 1.0
            dev = max(dev, abs(lm - lb), float(np.abs(rm - rb).max()))

        lc1, rc1, _ = batch_loss_and_grad(LossSpec("cat_xent"), logp, targets,
                                          student_am, teacher_am, teacher_lp)
        lc2, rc2, _ = batch_loss_and_grad(LossSpec("cat_dist", 1.0), logp, targets,
                                          student_am, teacher_am, teacher_lp)
        dev = max(dev, abs(lc1 - lc2), float(np.abs(rc1 - rc2).max()))
        max_dev = max(max_dev, dev)
    return {"order": 1, "name": "loss_identities", "pass": bool(max_dev < 1e-9),
            "max_abs_deviation": max_dev, "instances": n_instances}


def _grad_check_batch(net: model_mod.Model, rng: np.random.Generator):
    """Two examples whose targets half-match the model's own greedy picks."""
    bos, sep, pad = 1, 2, 0
    content = list(range(3, 12))
    examples = []
    for x, n_resp in (((4, 5, 6), 3), ((9, 4, 7), 4)):
        y: list[int] = []
        for i in range(n_resp):
            lp = model_mod.forward_teacher_forced(net, x, tuple(y) + (content[0],),
                                                  bos, sep, pad)
            am = int(np.argmax(lp[i]))
            if i % 2 == 0:
                y.append(am)
            else:
                y.append(int(rng.choice([t for t in content if t != am])))
        examples.append((x, tuple(y)))
    k = sum(len(y) for _, y in examples)
    targets = np.concatenate([list(y) for _, y in examples])
    teacher_lp = model_mod._log_softmax(rng.normal(0.0, 1.0, (k, 12)))
    match = np.arange(k) % 3 == 0
    raw = teacher_lp.copy()
    raw[match, targets[match]] = raw[match].max(axis=1) + 1.0
    teacher_lp = model_mod._log_softmax(raw)
    return examples, np.argmax(teacher_lp, axis=1), teacher_lp


def check_gradient(n_coords: int = 200, seed: int = 77, h: float = 1e-4) -> dict:
    """Central finite differences vs analytic gradients for all loss kinds.

    Relative error uses ``|fd - g| / max(1e-4, |fd|, |g|)`` so coordinates
    with near-zero true gradient compare against an absolute floor.
    """
    cfg = model_mod.ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16,
                                vocab_size=12, max_seq_len=16, init_seed=5)
    rng = np.random.default_rng(seed)
    net = model_mod.init_model(cfg)
    for key in net.params:
        net.params[key] = net.params[key] + rng.normal(0.0, 0.05, net.params[key].shape)
    examples, teacher_am, teacher_lp = _grad_check_batch(net, rng)
    batch = model_mod.pack_batch(examples, 1, 2, 0, cfg.max_seq_len)

    def loss_of(spec: LossSpec) -> float:
        logits = model_mod._forward(net, batch.tokens)
        rows = logits[batch.pred_rows, batch.pred_cols]
        logp = model_mod._log_softmax(rows)
        loss, _, _ = batch_loss_and_grad(spec, logp, batch.targets,
                                         np.argmax(rows, axis=1), teacher_am, teacher_lp)
        return loss

    names = list(net.params)
    worst = {}
    for kind in LOSS_KINDS:
        spec = LossSpec(kind, 0.3)
        _, grads, _ = model_mod.loss_and_grad(net, examples, spec, 1, 2, 0,
                                              teacher_argmax=teacher_am,
                                              teacher_logprobs=teacher_lp)
        coord_rng = np.random.default_rng(seed + 1)
        worst_rel = 0.0
        for _ in range(n_coords):
            name = names[coord_rng.integers(len(names))]
            idx = tuple(coord_rng.integers(s) for s in net.params[name].shape)
            orig = net.params[name][idx]
            net.params[name][idx] = orig + h
            lp_hi = loss_of(spec)
            net.params[name][idx] = orig - h
            lp_lo = loss_of(spec)
            net.params[name][idx] = orig
            fd = (lp_hi - lp_lo) / (2.0 * h)
            an = grads[name][idx]
            worst_rel = max(worst_rel, abs(fd - an) / max(1e-4, abs(fd), abs(an)))
        worst[kind] = worst_rel
    return {"order": 2, "name": "gradient_check",
            "pass": bool(max(worst.values()) < 1e-4),
            "worst_relative_error_by_kind": worst, "coords_per_kind": n_coords}


def check_masking(n_positions: int = 1000, seed: int = 99) -> dict:
    """The two-sided mask is the union of the one-sided masks, and masked
    positions receive exactly zero gradient."""
    rng = np.random.default_rng(seed)
    v = 12
    targets = rng.integers(0, v, n_positions)
    student_am = rng.integers(0, v, n_positions)
    teacher_am = rng.integers(0, v, n_positions)
    both = compute_alpha(targets, student_am, teacher_am, "both")
    union = np.logical_or(compute_alpha(targets, student_am, None, "small_only"),
                          compute_alpha(targets, None, teacher_am, "large_only"))
    union_ok = bool(np.array_equal(both, union.astype(np.float64)))

    logp = model_mod._log_softmax(rng.normal(0.0, 1.0, (n_positions, v)))
    _, rows, alpha = batch_loss_and_grad(LossSpec("cat_xent"), logp, targets,
                                         student_am, teacher_am, None)
    masked_grad = float(np.abs(rows[alpha == 0.0]).max()) if np.any(alpha == 0.0) else 0.0
    return {"order": 3, "name": "masking_semantics",
            "pass": bool(union_ok and masked_grad == 0.0),
            "union_matches": union_ok, "max_masked_gradient": masked_grad,
            "positions": n_positions}


def check_bleu_oracle(n_corpora: int = 20, seed: int = 1234) -> dict:
    """Production scorer against the frozen plain-loop reference."""
    rng = np.random.default_rng(seed)
    max_dev = 0.0
    for _ in range(n_corpora):
        n_pairs = int(rng.integers(1, 11))
        cands, refs = [], []
        for _ in range(n_pairs):
            cands.append([int(t) for t in rng.integers(0, 20, rng.integers(0, 13))])
            refs.append([int(t) for t in rng.integers(0, 20, rng.integers(1, 13))])
        max_dev = max(max_dev, abs(bleu(cands, refs) - bleu_reference(cands, refs)))
    return {"order": 5, "name": "bleu_oracle", "pass": bool(max_dev < 1e-9),
            "max_abs_deviation": max_dev, "corpora": n_corpora}


# ---------------------------------------------------------------------------
# artifact checks


def _curve(paths: RunPaths, label: str, rule_label: str):
    path = paths.curve_csv(label, rule_label)
    return read_curve_csv(path) if path.exists() else None


def _common_seeds(cfg: ExperimentConfig, kind_a: str, kind_b: str):
    kinds = {run.kind: run for run in cfg.losses}
    if kind_a not in kinds or kind_b not in kinds:
        return None
    return [s for s in kinds[kind_a].seeds if s in kinds[kind_b].seeds]


def check_sweep_identities(cfg: ExperimentConfig, paths: RunPaths) -> dict:
    """Per-curve identities: quality decomposition, cost accounting,
    endpoint agreement with standalone models, monotone deferral rate."""
    results = json.loads(paths.results_path.read_text())
    cost_large = 2.0 * results["teacher"]["param_count"]
    checked = 0
    max_dev = 0.0
    endpoint_dev = 0.0
    monotone = True
    for run in cfg.losses:
        for seed in run.seeds:
            label = run.label(seed)
            cost_small = 2.0 * results["students"][label]["param_count"]
            for rule in cfg.rules:
                points = _curve(paths, label, rule.label())
                if points is None:
                    continue
                rows = read_score_log(paths.score_log(label, rule.label()))
                n = len(rows)
                small_mean = np.array([r.small_quality for r in rows]).sum() / n
                large_mean = np.array([r.large_quality for r in rows]).sum() / n
                rates = [p.deferral_rate for p in points]
                monotone = monotone and all(a <= b for a, b in zip(rates, rates[1:]))
                for p in points:
                    max_dev = max(max_dev, abs(p.a1 + p.a2 - p.quality),
                                  abs(p.mean_cost - (cost_small
                                                     + p.deferral_rate * cost_large)))
                endpoint_dev = max(endpoint_dev,
                                   abs(points[0].quality - small_mean),
                                   abs(points[-1].quality - large_mean))
                checked += 1
    ok = checked > 0 and max_dev < 1e-9 and endpoint_dev == 0.0 and monotone
    return {"order": 4, "name": "sweep_identities", "pass": bool(ok),
            "curves_checked": checked, "max_identity_deviation": max_dev,
            "max_endpoint_deviation": endpoint_dev, "rate_monotone": monotone}


def _cls_quality_at(paths: RunPaths, cfg: ExperimentConfig, label: str,
                    rule_label: str, rate: float) -> float:
    cls_tasks = {s.task_id for s in cfg.task_specs() if s.family == "classification"}
    rows = read_score_log(paths.score_log(label, rule_label))
    cls_rows = [r for r in rows if r.example_id.split("/")[0] in cls_tasks]
    points = sweep(cls_rows, 1.0, 1.0, rule_label, label)
    return value_at_rate(points, rate)


def check_audc_gain(cfg: ExperimentConfig, paths: RunPaths) -> dict:
    """Masked cross entropy beats plain cross entropy: per-seed AUDC gain,
    plus a mean classification-quality gain of one absolute point at
    deferral rate 0.2."""
    seeds = _common_seeds(cfg, "cat_xent", "xent")
    base = {"order": 6, "name": "audc_gain_cat_xent_vs_xent"}
    if not seeds:
        return {**base, "pass": None, "note": "run lacks cat_xent and xent seeds"}
    rule = "average"
    audc_gaps, cls_gaps = [], []
    for seed in seeds:
        cat = _curve(paths, f"cat_xent_seed{seed}", rule)
        plain = _curve(paths, f"xent_seed{seed}", rule)
        if cat is None or plain is None:
            return {**base, "pass": None, "note": f"missing curves for seed {seed}"}
        audc_gaps.append(audc(cat) - audc(plain))
        cls_gaps.append(_cls_quality_at(paths, cfg, f"cat_xent_seed{seed}", rule, 0.2)
                        - _cls_quality_at(paths, cfg, f"xent_seed{seed}", rule, 0.2))
    improved = sum(1 for g in audc_gaps if g > 0)
    need = _required(len(seeds), 0.8)
    mean_cls_gap = float(np.mean(cls_gaps))
    return {**base,
            "pass": bool(improved >= need and mean_cls_gap >= 0.01),
            "audc_gap_per_seed": audc_gaps, "seeds_improved": improved,
            "seeds_required": need, "cls_quality_gap_at_rate_0.2_per_seed": cls_gaps,
            "mean_cls_quality_gap": mean_cls_gap, "cls_gap_required": 0.01}


def check_decomposition(cfg: ExperimentConfig, paths: RunPaths) -> dict:
    """The gain lives in the kept part: positive mean A1 gap at matched
    deferral rates, while A2 differences stay smaller than the A1 effect."""
    seeds = _common_seeds(cfg, "cat_xent", "xent")
    base = {"order": 7, "name": "kept_quality_drives_gains"}
    if not seeds:
        return {**base, "pass": None, "note": "run lacks cat_xent and xent seeds"}
    a1_means, a2_means, a2_abs = [], [], []
    for seed in seeds:
        cat = _curve(paths, f"cat_xent_seed{seed}", "average")
        plain = _curve(paths, f"xent_seed{seed}", "average")
        if cat is None or plain is None:
            return {**base, "pass": None, "note": f"missing curves for seed {seed}"}
        a1_gaps = [value_at_rate(cat, r, "a1") - value_at_rate(plain, r, "a1")
                   for r in MATCHED_RATES]
        a2_gaps = [value_at_rate(cat, r, "a2") - value_at_rate(plain, r, "a2")
                   for r in MATCHED_RATES]
        a1_means.append(float(np.mean(a1_gaps)))
        a2_means.append(float(np.mean(a2_gaps)))
        a2_abs.append(float(np.mean(np.abs(a2_gaps))))
    positive = sum(1 for g in a1_means if g > 0)
    need = _required(len(seeds), 0.8)
    a1_effect = float(np.mean(a1_means))
    a2_effect = float(np.mean(a2_abs))
    return {**base, "pass": bool(positive >= need and a2_effect < a1_effect),
            "a1_mean_gap_per_seed": a1_means, "seeds_positive": positive,
            "seeds_required": need, "a2_mean_gap_per_seed": a2_means,
            "mean_abs_a2_gap": a2_effect, "mean_a1_gap": a1_effect,
            "rates": list(MATCHED_RATES)}


def check_rule_ranking(cfg: ExperimentConfig, paths: RunPaths) -> dict:
    """The per-token average rule is at least as good as the alternatives."""
    base = {"order": 8, "name": "average_rule_best"}
    run = next((r for r in cfg.losses if r.kind == "cat_xent"), None)
    if run is None:
        return {**base, "pass": None, "note": "run lacks cat_xent"}
    others = [r for r in cfg.rules if r.name != "average" and r.name != "learned_router"]
    if not others or not any(r.name == "average" for r in cfg.rules):
        return {**base, "pass": None, "note": "rule list lacks comparisons"}
    need = _required(len(run.seeds), 0.6)
    per_rule = {}
    for rule in others:
        wins = 0
        for seed in run.seeds:
            avg_points = _curve(paths, run.label(seed), "average")
            other_points = _curve(paths, run.label(seed), rule.label())
            if avg_points is None or other_points is None:
                return {**base, "pass": None, "note": f"missing curves for seed {seed}"}
            if audc(avg_points) >= audc(other_points):
                wins += 1
        per_rule[str(rule)] = wins
    return {**base, "pass": bool(all(w >= need for w in per_rule.values())),
            "seeds_where_average_wins": per_rule, "seeds_required": need,
            "seeds_total": len(run.seeds)}


def check_self_mask_lag(cfg: ExperimentConfig, paths: RunPaths) -> dict:
    """Student-only masking trains slower: worse eval loss and exact match."""
    seeds = _common_seeds(cfg, "cat_xent_s", "cat_xent")
    base = {"order": 9, "name": "self_masked_training_lags"}
    if not seeds:
        return {**base, "pass": None, "note": "run lacks cat_xent_s and cat_xent seeds"}
    results = json.loads(paths.results_path.read_text())
    students = results["students"]
    lagging = []
    for seed in seeds:
        s = students.get(f"cat_xent_s_seed{seed}")
        c = students.get(f"cat_xent_seed{seed}")
        if s is None or c is None:
            return {**base, "pass": None, "note": f"missing results for seed {seed}"}
        lagging.append(bool(s["eval_xent"] > c["eval_xent"]
                            and s["exact_match_rate"] < c["exact_match_rate"]))
    need = _required(len(seeds), 0.8)
    return {**base, "pass": bool(sum(lagging) >= need),
            "seeds_lagging": sum(lagging), "seeds_required": need,
            "per_seed": lagging}


def check_determinism(cfg: ExperimentConfig, paths: RunPaths) -> dict:
    """Recompute every curve from its score log and compare bytes; record a
    checksum manifest so two full runs can be diffed externally."""
    results = json.loads(paths.results_path.read_text())
    cost_large = 2.0 * results["teacher"]["param_count"]
    manifest = {}
    recompute_ok = True
    for run in cfg.losses:
        for seed in run.seeds:
            label = run.label(seed)
            cost_small = 2.0 * results["students"][label]["param_count"]
            for rule in cfg.rules:
                path = paths.curve_csv(label, rule.label())
                if not path.exists():
                    continue
                text = path.read_text()
                manifest[str(path.relative_to(paths.root))] = hashlib.sha256(
                    text.encode()).hexdigest()
                rows = read_score_log(paths.score_log(label, rule.label()))
                redo = curve_csv_text(sweep(rows, cost_small, cost_large,
                                            str(rule), label))
                recompute_ok = recompute_ok and (redo == text)
    for extra in (paths.results_path, paths.report_path):
        if extra.exists():
            manifest[str(extra.relative_to(paths.root))] = hashlib.sha256(
                extra.read_bytes()).hexdigest()
    return {"order": 10, "name": "determinism", "pass": bool(recompute_ok and manifest),
            "curves_recompute_identical": recompute_ok,
            "note": "manifest checksums must match across two runs with the same config",
            "manifest": dict(sorted(manifest.items()))}


def write_acceptance_summary(cfg: ExperimentConfig, paths: RunPaths) -> dict:
    checks = [
        check_loss_identities(),
        check_gradient(),
        check_masking(),
        check_sweep_identities(cfg, paths),
        check_bleu_oracle(),
        check_audc_gain(cfg, paths),
        check_decomposition(cfg, paths),
        check_rule_ranking(cfg, paths),
        check_self_mask_lag(cfg, paths),
        check_determinism(cfg, paths),
    ]
    checks.sort(key=lambda c: c["order"])
    summary = {
        "schema_version": 1,
        "checks": checks,
        "all_pass": all(c["pass"] for c in checks if c["pass"] is not None),
        "undecided": [c["name"] for c in checks if c["pass"] is None],
    }
    paths.acceptance_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
