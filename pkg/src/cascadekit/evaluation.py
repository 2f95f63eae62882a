"""Quality metrics, deferral-curve sweeps, and report rendering.

A sweep never re-runs a model: it consumes threshold-free score logs (one
decode of each model per example) and replays the deferral decision at every
interesting threshold.  Thresholds are the midpoints between adjacent
distinct scores plus two infinite sentinels, so the curve contains every
achievable operating point exactly once, from deferral rate 0 to 1.

Cascade quality at a threshold decomposes into kept and deferred parts:
``a1`` is the summed quality of examples the small model kept divided by the
total example count, ``a2`` the same for deferred examples under the large
model, and ``quality = a1 + a2``.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as model_mod
from .cascade import ScoreRow
from .corpus import Vocab

CURVE_COLUMNS = ("rule", "loss", "tau", "deferral_rate", "mean_cost", "quality", "a1", "a2")

_SVG_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                "#8c564b", "#e377c2", "#17becf")


class EvalError(ValueError):
    """Invalid metric input or malformed curve file."""


# ---------------------------------------------------------------------------
# per-example metrics


def content_tokens(seq: Sequence[int], eos_id: int) -> tuple[int, ...]:
    """Tokens before the first eos; decodes and gold responses both qualify."""
    out = []
    for tok in seq:
        if tok == eos_id:
            break
        out.append(int(tok))
    return tuple(out)


def exact_match(y_hat: Sequence[int], y_gold: Sequence[int], eos_id: int) -> bool:
    """True only for a properly eos-terminated decode equal to the gold response."""
    y_hat = tuple(y_hat)
    return bool(y_hat) and y_hat[-1] == eos_id and y_hat == tuple(y_gold)


def _ngrams(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> float:
    """Corpus BLEU-4 over integer tokens, one reference per candidate.

    Uniform 1/4 weights; brevity penalty ``exp(1 - r/c)`` when the candidate
    corpus is shorter.  Orders n >= 2 get add-one smoothing only when their
    clipped match count is zero (and count as precision 1 when no candidate
    n-grams exist); unigrams are never smoothed, so zero unigram matches or
    an empty candidate corpus give 0.
    """
    if len(candidates) != len(references):
        raise EvalError("candidates and references must pair up one-to-one")
    c_len = sum(len(c) for c in candidates)
    r_len = sum(len(r) for r in references)
    if c_len == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        matched = 0
        total = 0
        for cand, ref in zip(candidates, references):
            if len(cand) < n:
                continue
            cand_counts = _ngrams(cand, n)
            ref_counts = _ngrams(ref, n)
            matched += sum(min(count, ref_counts[gram])
                           for gram, count in cand_counts.items())
            total += len(cand) - n + 1
        if n == 1:
            if matched == 0:
                return 0.0
            p_n = matched / total
        elif total == 0:
            p_n = 1.0
        elif matched == 0:
            p_n = 1.0 / (total + 1)
        else:
            p_n = matched / total
        log_sum += 0.25 * np.log(p_n)
    bp = np.exp(1.0 - r_len / c_len) if c_len < r_len else 1.0
    return float(bp * np.exp(log_sum))


def sentence_bleu(candidate: Sequence[int], reference: Sequence[int]) -> float:
    return bleu([candidate], [reference])


def example_quality(family: str, y_hat: Sequence[int], y_gold: Sequence[int],
                    eos_id: int) -> float:
    """Classification scores exact match; generation scores sentence BLEU."""
    if family == "classification":
        return float(exact_match(y_hat, y_gold, eos_id))
    if family == "generation":
        return sentence_bleu(content_tokens(y_hat, eos_id), content_tokens(y_gold, eos_id))
    raise EvalError(f"unknown task family {family!r}")


# ---------------------------------------------------------------------------
# dataset-level model metrics


def _batched_logprobs(model: model_mod.Model, examples: Sequence, vocab: Vocab,
                      batch_size: int):
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        yield chunk, model_mod.forward_teacher_forced_batch(
            model, chunk, vocab.bos_id, vocab.sep_id, vocab.pad_id)


def dataset_xent(model: model_mod.Model, examples: Sequence, vocab: Vocab,
                 batch_size: int = 64) -> float:
    """Mean per-token negative log-likelihood of gold responses."""
    total, count = 0.0, 0
    for chunk, blocks in _batched_logprobs(model, examples, vocab, batch_size):
        for ex, lp in zip(chunk, blocks):
            total -= lp[np.arange(len(ex.y)), list(ex.y)].sum()
            count += len(ex.y)
    if count == 0:
        raise EvalError("dataset is empty")
    return float(total / count)


def next_token_acc(model: model_mod.Model, examples: Sequence, vocab: Vocab,
                   batch_size: int = 64) -> float:
    """Teacher-forced greedy accuracy over response tokens."""
    hits, count = 0, 0
    for chunk, blocks in _batched_logprobs(model, examples, vocab, batch_size):
        for ex, lp in zip(chunk, blocks):
            hits += int((np.argmax(lp, axis=1) == np.asarray(ex.y)).sum())
            count += len(ex.y)
    if count == 0:
        raise EvalError("dataset is empty")
    return hits / count


# ---------------------------------------------------------------------------
# deferral-curve sweep


@dataclass(frozen=True)
class CurvePoint:
    rule: str
    loss: str
    tau: float
    deferral_rate: float
    mean_cost: float
    quality: float
    a1: float
    a2: float


def sweep(rows: Sequence[ScoreRow], cost_small: float, cost_large: float,
          rule_label: str, loss_label: str) -> list[CurvePoint]:
    """Deferral curve from a score log, ordered by increasing deferral rate."""
    if not rows:
        raise EvalError("cannot sweep an empty score log")
    n = len(rows)
    scores = np.array([r.score for r in rows])
    small_q = np.array([r.small_quality for r in rows])
    large_q = np.array([r.large_quality for r in rows])
    distinct = np.unique(scores)
    taus = np.concatenate([[-np.inf], (distinct[:-1] + distinct[1:]) / 2.0, [np.inf]])
    points = []
    for tau in taus:
        deferred = scores >= tau
        rate = float(deferred.mean())
        a1 = float(small_q[~deferred].sum() / n)
        a2 = float(large_q[deferred].sum() / n)
        points.append(CurvePoint(
            rule=rule_label, loss=loss_label, tau=float(tau), deferral_rate=rate,
            mean_cost=cost_small + rate * cost_large, quality=a1 + a2, a1=a1, a2=a2))
    points.sort(key=lambda p: p.deferral_rate)
    return points


def audc(points: Sequence[CurvePoint]) -> float:
    """Area under quality vs deferral rate, trapezoid rule over [0, 1]."""
    rates = np.array([p.deferral_rate for p in points])
    quality = np.array([p.quality for p in points])
    if rates[0] != 0.0 or rates[-1] != 1.0 or np.any(np.diff(rates) < 0):
        raise EvalError("curve must cover rates 0 to 1 in nondecreasing order")
    return float(np.trapezoid(quality, rates))


def value_at_rate(points: Sequence[CurvePoint], rate: float, field: str = "quality") -> float:
    """A curve field at a deferral rate, linearly interpolated between points."""
    rates = np.array([p.deferral_rate for p in points])
    values = np.array([getattr(p, field) for p in points])
    if not (rates[0] <= rate <= rates[-1]):
        raise EvalError(f"rate {rate} is outside the curve's range")
    return float(np.interp(rate, rates, values))


def quality_at_rate(points: Sequence[CurvePoint], rate: float) -> float:
    return value_at_rate(points, rate, "quality")


# ---------------------------------------------------------------------------
# curve CSV I/O


def curve_csv_text(points: Sequence[CurvePoint]) -> str:
    lines = [",".join(CURVE_COLUMNS)]
    for p in points:
        lines.append(f"{p.rule},{p.loss},{p.tau:.17g},{p.deferral_rate:.17g},"
                     f"{p.mean_cost:.17g},{p.quality:.17g},{p.a1:.17g},{p.a2:.17g}")
    return "\n".join(lines) + "\n"


def write_curve_csv(points: Sequence[CurvePoint], path: str | Path) -> None:
    Path(path).write_text(curve_csv_text(points))


def read_curve_csv(path: str | Path) -> list[CurvePoint]:
    points: list[CurvePoint] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(CURVE_COLUMNS):
            raise EvalError(f"{path} does not look like a curve file")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(CURVE_COLUMNS):
                raise EvalError(f"{path}:{lineno}: expected {len(CURVE_COLUMNS)} fields")
            try:
                points.append(CurvePoint(
                    rule=rec[0], loss=rec[1], tau=float(rec[2]), deferral_rate=float(rec[3]),
                    mean_cost=float(rec[4]), quality=float(rec[5]), a1=float(rec[6]),
                    a2=float(rec[7])))
            except ValueError as exc:
                raise EvalError(f"{path}:{lineno}: {exc}") from exc
    return points


# ---------------------------------------------------------------------------
# SVG report rendering


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (count - 1) for i in range(count)]


def render_curves_svg(series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
                      path: str | Path, title: str, xlabel: str, ylabel: str,
                      width: int = 640, height: int = 440) -> None:
    """Write a multi-series line chart as a standalone SVG file.

    ``series`` holds (label, xs, ys) triples.  Output is plain text built
    with fixed decimal formatting, so identical inputs give identical bytes.
    """
    ml, mr, mt, mb = 60, 160, 40, 50
    plot_w, plot_h = width - ml - mr, height - mt - mb
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    if not xs_all:
        raise EvalError("cannot render an empty chart")
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    if y_hi <= y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def px(x: float) -> float:
        return ml + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y: float) -> float:
        return mt + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">{title}</text>',
        f'<line x1="{ml}" y1="{mt + plot_h}" x2="{ml + plot_w}" y2="{mt + plot_h}" '
        f'stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + plot_h}" stroke="black"/>',
    ]
    for tx in _ticks(x_lo, x_hi):
        parts.append(f'<line x1="{px(tx):.2f}" y1="{mt + plot_h}" x2="{px(tx):.2f}" '
                     f'y2="{mt + plot_h + 5}" stroke="black"/>')
        parts.append(f'<text x="{px(tx):.2f}" y="{mt + plot_h + 18}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="11">{tx:.2f}</text>')
    for ty in _ticks(y_lo, y_hi):
        parts.append(f'<line x1="{ml - 5}" y1="{py(ty):.2f}" x2="{ml}" y2="{py(ty):.2f}" '
                     f'stroke="black"/>')
        parts.append(f'<text x="{ml - 8}" y="{py(ty) + 4:.2f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{ty:.3f}</text>')
    parts.append(f'<text x="{ml + plot_w / 2:.1f}" y="{height - 12}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12">{xlabel}</text>')
    parts.append(f'<text x="16" y="{mt + plot_h / 2:.1f}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12" '
                 f'transform="rotate(-90 16 {mt + plot_h / 2:.1f})">{ylabel}</text>')
    for idx, (label, xs, ys) in enumerate(series):
        color = _SVG_PALETTE[idx % len(_SVG_PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                     f'points="{pts}"/>')
        ly = mt + 14 + 16 * idx
        lx = ml + plot_w + 10
        parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{lx + 24}" y="{ly}" font-family="sans-serif" '
                     f'font-size="11">{label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
