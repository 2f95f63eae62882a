"""Token-level training losses with optional capability-based masking.

Every loss is built from two ingredients applied per response token:

* a base term: plain cross entropy ``-log p(y_i)`` or a distillation blend
  ``-(w log p(y_i) + (1 - w) sum_v q_v log p(v))`` against a teacher
  distribution ``q``;
* a binary mask ``alpha_i`` that keeps a token only when its gold target
  agrees with a model's own greedy prediction under the gold prefix.

The batch loss is the alpha-weighted sum of base terms divided by
``max(1, sum(alpha))``, so fully-masked batches contribute zero rather than
dividing by zero.  Masks are treated as constants: no gradient flows through
the argmax comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOSS_KINDS = (
    "xent", "dist", "cat_xent", "cat_dist",
    "cat_xent_l", "cat_xent_s", "cat_dist_l", "cat_dist_s",
)

ALPHA_VARIANTS = ("both", "large_only", "small_only")

# mask variant per loss kind; None means all response tokens are kept
_KIND_VARIANT = {
    "xent": None, "dist": None,
    "cat_xent": "both", "cat_dist": "both",
    "cat_xent_l": "large_only", "cat_dist_l": "large_only",
    "cat_xent_s": "small_only", "cat_dist_s": "small_only",
}

_DIST_KINDS = frozenset({"dist", "cat_dist", "cat_dist_l", "cat_dist_s"})

NORMALIZATION_TOL = 1e-6


class LossError(ValueError):
    """Invalid loss configuration or missing teacher outputs."""


@dataclass(frozen=True)
class LossSpec:
    """A loss kind plus the distillation mixing weight ``w``.

    ``w`` is only meaningful for distillation kinds; cross-entropy kinds
    behave as if ``w == 1``.
    """

    kind: str
    w: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise LossError(f"unknown loss kind {self.kind!r}")
        if not (0.0 <= self.w <= 1.0):
            raise LossError(f"w must be in [0, 1], got {self.w}")

    @property
    def alpha_variant(self) -> str | None:
        return _KIND_VARIANT[self.kind]

    @property
    def effective_w(self) -> float:
        return self.w if self.kind in _DIST_KINDS else 1.0

    @property
    def needs_teacher_dist(self) -> bool:
        return self.kind in _DIST_KINDS

    @property
    def needs_teacher_argmax(self) -> bool:
        return self.alpha_variant in ("both", "large_only")

    @property
    def needs_teacher(self) -> bool:
        return self.needs_teacher_dist or self.needs_teacher_argmax


@dataclass(frozen=True)
class TeacherOutputs:
    """Teacher-forced outputs of a frozen model on one example.

    ``logprobs`` holds the [N, V] response log-distributions and ``argmax``
    the row-wise greedy picks, which must be mutually consistent.
    """

    argmax: np.ndarray
    logprobs: np.ndarray

    def __post_init__(self) -> None:
        if self.logprobs.ndim != 2 or self.argmax.shape != (self.logprobs.shape[0],):
            raise LossError("argmax must be [N] and logprobs [N, V]")
        if self.logprobs.shape[0]:
            lse = np.log(np.exp(self.logprobs).sum(axis=1))
            if np.any(np.abs(lse) > NORMALIZATION_TOL):
                raise LossError("teacher logprobs rows are not normalized")
            if np.any(np.argmax(self.logprobs, axis=1) != self.argmax):
                raise LossError("teacher argmax disagrees with its logprobs")


def compute_alpha(targets: np.ndarray, student_argmax: np.ndarray | None,
                  teacher_argmax: np.ndarray | None, variant: str) -> np.ndarray:
    """Binary keep-mask over response tokens for a masking variant.

    ``both`` keeps a token when either model's greedy pick matches the gold
    target; ``large_only``/``small_only`` consult a single model.
    """
    targets = np.asarray(targets)
    if variant not in ALPHA_VARIANTS:
        raise LossError(f"unknown alpha variant {variant!r}")
    if variant in ("both", "small_only"):
        if student_argmax is None:
            raise LossError(f"variant {variant!r} requires student argmax")
        small = np.asarray(student_argmax) == targets
    if variant in ("both", "large_only"):
        if teacher_argmax is None:
            raise LossError(f"variant {variant!r} requires teacher argmax")
        large = np.asarray(teacher_argmax) == targets
    if variant == "both":
        keep = small | large
    elif variant == "large_only":
        keep = large
    else:
        keep = small
    return keep.astype(np.float64)


def sequence_xent(logp: np.ndarray, y) -> float:
    """Summed negative log-likelihood of a response under [N, V] logprobs."""
    y = np.asarray(y)
    if logp.shape[0] != y.shape[0]:
        raise LossError("response length does not match logprob rows")
    return float(-logp[np.arange(y.size), y].sum())


def sequence_dist(logp: np.ndarray, y, teacher_logprobs: np.ndarray, w: float) -> float:
    """Summed distillation loss mixing gold targets and a teacher distribution."""
    y = np.asarray(y)
    if logp.shape != teacher_logprobs.shape:
        raise LossError("student and teacher logprobs must have equal shape")
    gold = logp[np.arange(y.size), y]
    soft = (np.exp(teacher_logprobs) * logp).sum(axis=1)
    return float(-(w * gold + (1.0 - w) * soft).sum())


def batch_loss_and_grad(spec: LossSpec, logp: np.ndarray, targets: np.ndarray,
                        student_argmax: np.ndarray,
                        teacher_argmax: np.ndarray | None = None,
                        teacher_logprobs: np.ndarray | None = None):
    """Loss, d(loss)/d(logits) rows, and the mask over flat response tokens.

    ``logp`` is [K, V] over the batch's response positions in example-major
    order; teacher arrays, when required, use the same layout.  The gradient
    rows are exact for the returned scalar, including the mask and the
    ``max(1, sum(alpha))`` normalizer, both held constant.
    """
    targets = np.asarray(targets)
    k, v = logp.shape
    if spec.needs_teacher_argmax and teacher_argmax is None:
        raise LossError(f"loss {spec.kind!r} requires teacher argmax")
    if spec.needs_teacher_dist and teacher_logprobs is None:
        raise LossError(f"loss {spec.kind!r} requires teacher logprobs")
    if teacher_logprobs is not None and teacher_logprobs.shape != (k, v):
        raise LossError("teacher logprobs shape does not match the batch")

    variant = spec.alpha_variant
    if variant is None:
        alpha = np.ones(k)
    else:
        alpha = compute_alpha(targets, student_argmax, teacher_argmax, variant)

    w = spec.effective_w
    onehot_terms = logp[np.arange(k), targets]
    if spec.needs_teacher_dist:
        q = np.exp(teacher_logprobs)
        terms = -(w * onehot_terms + (1.0 - w) * (q * logp).sum(axis=1))
    else:
        terms = -onehot_terms
    divisor = max(1.0, float(alpha.sum()))
    loss = float((alpha * terms).sum() / divisor)

    c = np.zeros((k, v))
    c[np.arange(k), targets] = w
    if spec.needs_teacher_dist:
        c += (1.0 - w) * q
    drows = (alpha[:, None] / divisor) * (np.exp(logp) - c)
    return loss, drows, alpha
