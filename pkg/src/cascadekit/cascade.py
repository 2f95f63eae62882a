"""Deferral rules, two-model cascade prediction, and score logging.

The small model always decodes; a scalar deferral score is computed from
its own decode, and the example is handed to the large model exactly when
``score >= tau``.  Scores are uncertainty-flavored: every built-in rule is a
statistic of the per-token negative log-probabilities of the small model's
greedy decode, so larger means less confident.  The ``learned_router`` rule
instead scores with a small MLP over the decode's token probabilities.

Per-example cost is ``cost_small`` plus ``cost_large`` when deferred; model
cost defaults to twice the parameter count, a forward-FLOPs-per-token proxy.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as model_mod
from .corpus import Vocab

RULE_NAMES = ("average", "sum", "maximum", "minimum", "quantile", "learned_router")
ROUTER_FEATURE_LEN = 64
SCORE_LOG_COLUMNS = ("example_id", "score", "small_correct", "large_correct",
                     "small_quality", "large_quality", "n_tokens")


class CascadeError(ValueError):
    """Invalid rule, router, or score-log contents."""


@dataclass(frozen=True)
class DeferralRuleSpec:
    """A deferral rule name plus, for ``quantile``, its level ``q``."""

    name: str
    q: float | None = None

    def __post_init__(self) -> None:
        if self.name not in RULE_NAMES:
            raise CascadeError(f"unknown deferral rule {self.name!r}")
        if self.name == "quantile":
            if self.q is None or not (0.0 <= self.q <= 1.0):
                raise CascadeError("quantile rule needs q in [0, 1]")
        elif self.q is not None:
            raise CascadeError(f"rule {self.name!r} takes no parameter")

    @classmethod
    def parse(cls, text: str) -> "DeferralRuleSpec":
        """Parse ``"average"`` or ``"quantile:0.4"`` style rule strings."""
        if ":" in text:
            name, _, arg = text.partition(":")
            try:
                return cls(name=name.strip(), q=float(arg))
            except ValueError as exc:
                if isinstance(exc, CascadeError):
                    raise
                raise CascadeError(f"bad rule parameter in {text!r}") from exc
        return cls(name=text.strip())

    def label(self) -> str:
        """Filesystem-safe label, e.g. ``quantile_0.40``."""
        if self.name == "quantile":
            return f"quantile_{self.q:.2f}"
        return self.name

    def __str__(self) -> str:
        if self.name == "quantile":
            return f"quantile:{self.q:g}"
        return self.name


def deferral_score(token_logprobs: Sequence[float], rule: DeferralRuleSpec) -> float:
    """Scalar uncertainty of a greedy decode under a statistic rule.

    Operates on ``u_i = -logprob_i`` of the decoded tokens (eos included).
    """
    if rule.name == "learned_router":
        raise CascadeError("learned_router scores come from a Router, not this function")
    u = -np.asarray(token_logprobs, dtype=np.float64)
    if u.size == 0:
        raise CascadeError("cannot score an empty decode")
    if rule.name == "average":
        return float(u.mean())
    if rule.name == "sum":
        return float(u.sum())
    if rule.name == "maximum":
        return float(u.max())
    if rule.name == "minimum":
        return float(u.min())
    return float(np.quantile(u, rule.q))


# ---------------------------------------------------------------------------
# learned router


def router_features(token_logprobs: Sequence[float],
                    feature_len: int = ROUTER_FEATURE_LEN) -> np.ndarray:
    """Token probabilities of a decode, zero-padded or truncated to a fixed width."""
    probs = np.exp(np.asarray(token_logprobs, dtype=np.float64))[:feature_len]
    out = np.zeros(feature_len)
    out[:probs.size] = probs
    return out


def router_labels(small_correct: np.ndarray, large_correct: np.ndarray) -> np.ndarray:
    """Deferral-helps labels: 1 where the small model fails and the large one succeeds."""
    return (~np.asarray(small_correct, dtype=bool)
            & np.asarray(large_correct, dtype=bool)).astype(np.float64)


@dataclass
class Router:
    """Two-layer tanh MLP emitting a deferral probability per decode."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float

    def score(self, features: np.ndarray) -> np.ndarray:
        """Sigmoid deferral scores in [0, 1] for [N, L] feature rows."""
        z = np.tanh(features @ self.w1 + self.b1) @ self.w2 + self.b2
        return 1.0 / (1.0 + np.exp(-z))


def train_router(features: np.ndarray, labels: np.ndarray, seed: int,
                 hidden: int = 32, epochs: int = 300, lr: float = 0.01) -> Router:
    """Fit the router MLP with full-batch adaptive updates on a BCE objective.

    Degenerate label sets (all zero or all one) trigger a warning; the fit
    still runs and yields a near-constant router.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise CascadeError("features must be [N, L] with one label per row")
    if features.shape[0] == 0:
        raise CascadeError("cannot train a router on zero examples")
    if labels.min() == labels.max():
        warnings.warn("router labels are degenerate (all identical); "
                      "the fitted router will be near-constant", stacklevel=2)
    n, l = features.shape
    rng = np.random.default_rng(seed)
    params = {
        "w1": rng.normal(0.0, 1.0 / np.sqrt(l), size=(l, hidden)),
        "b1": np.zeros(hidden),
        "w2": rng.normal(0.0, 1.0 / np.sqrt(hidden), size=hidden),
        "b2": np.zeros(1),
    }
    m_state = {k: np.zeros_like(v) for k, v in params.items()}
    v_state = {k: np.zeros_like(v) for k, v in params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    for t in range(1, epochs + 1):
        hpre = features @ params["w1"] + params["b1"]
        h = np.tanh(hpre)
        z = h @ params["w2"] + params["b2"][0]
        p = 1.0 / (1.0 + np.exp(-z))
        dz = (p - labels) / n
        grads = {
            "w2": h.T @ dz,
            "b2": np.array([dz.sum()]),
        }
        dh = np.outer(dz, params["w2"]) * (1.0 - h * h)
        grads["w1"] = features.T @ dh
        grads["b1"] = dh.sum(axis=0)
        for k, g in grads.items():
            m_state[k] = beta1 * m_state[k] + (1.0 - beta1) * g
            v_state[k] = beta2 * v_state[k] + (1.0 - beta2) * g * g
            mhat = m_state[k] / (1.0 - beta1 ** t)
            vhat = v_state[k] / (1.0 - beta2 ** t)
            params[k] -= lr * mhat / (np.sqrt(vhat) + eps)
    return Router(w1=params["w1"], b1=params["b1"], w2=params["w2"], b2=float(params["b2"][0]))


# ---------------------------------------------------------------------------
# cascade prediction


def model_cost(model: model_mod.Model) -> float:
    """Per-token compute proxy: two FLOPs per parameter."""
    return 2.0 * model.param_count


@dataclass(frozen=True)
class CascadePrediction:
    y_hat: tuple[int, ...]
    deferred: bool
    score: float
    cost: float


def cascade_predict(small: model_mod.Model, large: model_mod.Model,
                    xs: Sequence[Sequence[int]], vocab: Vocab, tau: float,
                    rule: DeferralRuleSpec, max_new_tokens: int,
                    router: Router | None = None,
                    cost_small: float | None = None,
                    cost_large: float | None = None) -> list[CascadePrediction]:
    """Run the cascade at one threshold; the large model only sees deferrals."""
    if rule.name == "learned_router" and router is None:
        raise CascadeError("rule learned_router requires a trained Router")
    cost_s = model_cost(small) if cost_small is None else cost_small
    cost_l = model_cost(large) if cost_large is None else cost_large
    small_out = model_mod.greedy_decode_batch(
        small, xs, max_new_tokens, vocab.bos_id, vocab.sep_id, vocab.pad_id, vocab.eos_id)
    if rule.name == "learned_router":
        feats = np.stack([router_features(r.token_logprobs) for r in small_out])
        scores = router.score(feats)
    else:
        scores = np.array([deferral_score(r.token_logprobs, rule) for r in small_out])
    deferred = scores >= tau
    defer_idx = np.flatnonzero(deferred)
    large_out: dict[int, model_mod.DecodeResult] = {}
    if defer_idx.size:
        results = model_mod.greedy_decode_batch(
            large, [xs[i] for i in defer_idx], max_new_tokens,
            vocab.bos_id, vocab.sep_id, vocab.pad_id, vocab.eos_id)
        large_out = dict(zip(defer_idx.tolist(), results))
    preds = []
    for i in range(len(xs)):
        chosen = large_out[i] if bool(deferred[i]) else small_out[i]
        preds.append(CascadePrediction(
            y_hat=chosen.y_hat, deferred=bool(deferred[i]), score=float(scores[i]),
            cost=cost_s + (cost_l if deferred[i] else 0.0)))
    return preds


# ---------------------------------------------------------------------------
# score logs


@dataclass(frozen=True)
class ScoreRow:
    """One eval example's cascade-relevant measurements, threshold-free."""

    example_id: str
    score: float
    small_correct: bool
    large_correct: bool
    small_quality: float
    large_quality: float
    n_tokens: int


def write_score_log(rows: Sequence[ScoreRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_LOG_COLUMNS)
        for r in rows:
            writer.writerow([r.example_id, f"{r.score:.17g}", int(r.small_correct),
                             int(r.large_correct), f"{r.small_quality:.17g}",
                             f"{r.large_quality:.17g}", r.n_tokens])


def read_score_log(path: str | Path) -> list[ScoreRow]:
    rows: list[ScoreRow] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(SCORE_LOG_COLUMNS):
            raise CascadeError(f"{path} does not look like a score log")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(SCORE_LOG_COLUMNS):
                raise CascadeError(f"{path}:{lineno}: expected {len(SCORE_LOG_COLUMNS)} fields")
            try:
                rows.append(ScoreRow(
                    example_id=rec[0], score=float(rec[1]),
                    small_correct=bool(int(rec[2])), large_correct=bool(int(rec[3])),
                    small_quality=float(rec[4]), large_quality=float(rec[5]),
                    n_tokens=int(rec[6])))
            except ValueError as exc:
                raise CascadeError(f"{path}:{lineno}: {exc}") from exc
    return rows
