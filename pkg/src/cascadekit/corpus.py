"""Synthetic multi-task corpus: generation, label noise, and JSONL serialization.

Six task rules over a small closed vocabulary, three classification and three
generation, graded easy/medium/hard so that a capacity-limited model can learn
some tasks and not others.  All generation is driven by per-task seeds, so
corpora are reproducible and tasks can be generated independently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

TIERS = ("easy", "medium", "hard")
SPLITS = ("train", "eval")
FAMILIES = ("classification", "generation")
CLASSIFICATION_RULES = ("first_token_bucket", "majority_vote", "marker_parity")
GENERATION_RULES = ("copy", "reverse", "modular_add")

N_LABEL_TOKENS = 8


class CorpusError(ValueError):
    """Invalid task spec, example, or corpus file."""


@dataclass(frozen=True)
class Vocab:
    """Closed token vocabulary with four special tokens.

    ``tokens`` is the id->string map; ids are positions in the tuple.
    """

    tokens: tuple[str, ...]
    pad_id: int
    bos_id: int
    eos_id: int
    sep_id: int

    def __post_init__(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            dup = next(t for t in self.tokens if self.tokens.count(t) > 1)
            raise CorpusError(f"duplicate token string {dup!r} in vocabulary")
        specials = (self.pad_id, self.bos_id, self.eos_id, self.sep_id)
        if len(set(specials)) != 4:
            raise CorpusError("special token ids must be distinct")
        for sid in specials:
            if not 0 <= sid < len(self.tokens):
                raise CorpusError(f"special token id {sid} out of range")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def special_ids(self) -> tuple[int, int, int, int]:
        return (self.pad_id, self.bos_id, self.eos_id, self.sep_id)

    @property
    def label_ids(self) -> tuple[int, ...]:
        """Ids of the single-letter label tokens used by classification tasks."""
        return tuple(i for i, t in enumerate(self.tokens) if len(t) == 1 and t.isupper())

    @property
    def generic_ids(self) -> tuple[int, ...]:
        """Ids of the general-purpose content tokens (``t0``, ``t1``, ...)."""
        return tuple(i for i, t in enumerate(self.tokens) if t.startswith("t") and t[1:].isdigit())

    def id_of(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise CorpusError(f"unknown token string {token!r}") from None

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise CorpusError(f"token id {token_id} out of range")
        return self.tokens[token_id]


def default_vocab() -> Vocab:
    """64 content tokens (8 labels A..H + t0..t55) plus pad/bos/eos/sep."""
    tokens = ["<pad>", "<bos>", "<eos>", "<sep>"]
    tokens += [chr(ord("A") + i) for i in range(N_LABEL_TOKENS)]
    tokens += [f"t{i}" for i in range(64 - N_LABEL_TOKENS)]
    return Vocab(tokens=tuple(tokens), pad_id=0, bos_id=1, eos_id=2, sep_id=3)


def save_vocab(vocab: Vocab, path: str | Path) -> None:
    payload = {
        "tokens": list(vocab.tokens),
        "pad": vocab.pad_id,
        "bos": vocab.bos_id,
        "eos": vocab.eos_id,
        "sep": vocab.sep_id,
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def load_vocab(path: str | Path) -> Vocab:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        return Vocab(
            tokens=tuple(raw["tokens"]),
            pad_id=raw["pad"],
            bos_id=raw["bos"],
            eos_id=raw["eos"],
            sep_id=raw["sep"],
        )
    except KeyError as exc:
        raise CorpusError(f"vocab file missing field {exc.args[0]!r}") from None


@dataclass(frozen=True)
class Example:
    """One query/response pair.  ``tier`` and ``noisy`` are analysis-only."""

    task_id: str
    x: tuple[int, ...]
    y: tuple[int, ...]
    tier: str
    noisy: bool
    split: str

    def validate(self, vocab: Vocab) -> None:
        if len(self.x) < 1 or len(self.y) < 1:
            raise CorpusError("x and y must be non-empty")
        if self.tier not in TIERS:
            raise CorpusError(f"bad tier {self.tier!r}")
        if self.split not in SPLITS:
            raise CorpusError(f"bad split {self.split!r}")
        if self.noisy and self.split != "train":
            raise CorpusError("noisy examples must be in the train split")
        for t in self.x:
            if t in (vocab.eos_id, vocab.pad_id):
                raise CorpusError("x must not contain eos or pad")
        if self.y[-1] != vocab.eos_id:
            raise CorpusError("y must end with eos")
        if vocab.eos_id in self.y[:-1]:
            raise CorpusError("y must contain exactly one eos, at the end")
        if vocab.pad_id in self.y:
            raise CorpusError("y must not contain pad")


@dataclass(frozen=True)
class TaskSpec:
    """Parameters of one synthetic task.

    ``pool`` restricts the task to a slice (start, size) of the generic
    tokens; None means all of them.  Disjoint pools let a model tell tasks
    apart from the input alone, which matters because examples carry no
    explicit task marker.  ``window`` applies to marker_parity only (markers
    are counted over the first ``window`` input tokens; None means the whole
    input).  ``modulus`` applies to modular_add only.
    """

    task_id: str
    family: str
    rule: str
    tier: str
    input_len_range: tuple[int, int]
    n_classes: int | None = None
    response_len_range: tuple[int, int] | None = None
    noise_rate: float = 0.0
    seed: int = 0
    pool: tuple[int, int] | None = None
    window: int | None = None
    modulus: int = 16

    def __post_init__(self) -> None:
        lo, hi = self.input_len_range
        if not (1 <= lo <= hi):
            raise CorpusError(f"{self.task_id}: bad input_len_range {self.input_len_range}")
        if self.tier not in TIERS:
            raise CorpusError(f"{self.task_id}: bad tier {self.tier!r}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise CorpusError(f"{self.task_id}: noise_rate must be in [0, 1]")
        if self.pool is not None:
            start, size = self.pool
            if start < 0 or size < 2:
                raise CorpusError(f"{self.task_id}: bad pool {self.pool}")
        if self.family == "classification":
            if self.rule not in CLASSIFICATION_RULES:
                raise CorpusError(f"{self.task_id}: {self.rule!r} is not a classification rule")
            if self.n_classes is None or not 2 <= self.n_classes <= N_LABEL_TOKENS:
                raise CorpusError(
                    f"{self.task_id}: classification needs 2 <= n_classes <= {N_LABEL_TOKENS}"
                )
            if self.response_len_range is not None:
                raise CorpusError(f"{self.task_id}: classification takes no response_len_range")
            if self.rule == "marker_parity":
                if self.n_classes != 2:
                    raise CorpusError(f"{self.task_id}: marker_parity is binary")
                if self.window is not None and self.window > hi:
                    raise CorpusError(
                        f"{self.task_id}: parity window {self.window} exceeds max input length {hi}"
                    )
        elif self.family == "generation":
            if self.rule not in GENERATION_RULES:
                raise CorpusError(f"{self.task_id}: {self.rule!r} is not a generation rule")
            if self.n_classes is not None:
                raise CorpusError(f"{self.task_id}: generation takes no n_classes")
            # copy/reverse/modular_add all produce one output token per input
            # token, so the response length is pinned to the input length.
            if self.response_len_range != self.input_len_range:
                raise CorpusError(
                    f"{self.task_id}: response_len_range must equal input_len_range for {self.rule}"
                )
            if self.rule == "modular_add" and not 2 <= self.modulus <= 56:
                raise CorpusError(f"{self.task_id}: modulus must be in [2, 56]")
        else:
            raise CorpusError(f"{self.task_id}: bad family {self.family!r}")


def task_pool(spec: TaskSpec, vocab: Vocab) -> tuple[int, ...]:
    """Generic token ids the task draws its inputs from."""
    generic = vocab.generic_ids
    if spec.pool is None:
        return generic
    start, size = spec.pool
    if start + size > len(generic):
        raise CorpusError(
            f"{spec.task_id}: pool {spec.pool} exceeds the {len(generic)} generic tokens"
        )
    return generic[start:start + size]


def apply_rule(spec: TaskSpec, vocab: Vocab, x: Sequence[int]) -> tuple[int, ...]:
    """Content tokens of the clean response for input ``x`` (eos excluded)."""
    pool = task_pool(spec, vocab)
    labels = vocab.label_ids
    pos = {tid: i for i, tid in enumerate(pool)}
    if any(t not in pos for t in x):
        bad = next(t for t in x if t not in pos)
        raise CorpusError(f"{spec.task_id}: input token {bad} is outside the task pool")
    if spec.rule == "first_token_bucket":
        return (labels[pos[x[0]] % spec.n_classes],)
    if spec.rule == "majority_vote":
        counts = [0] * spec.n_classes
        for t in x:
            counts[pos[t]] += 1
        return (labels[counts.index(max(counts))],)
    if spec.rule == "marker_parity":
        w = len(x) if spec.window is None else min(spec.window, len(x))
        n_markers = sum(1 for t in x[:w] if t == pool[0])
        return (labels[n_markers % 2],)
    if spec.rule == "copy":
        return tuple(x)
    if spec.rule == "reverse":
        return tuple(reversed(x))
    if spec.rule == "modular_add":
        out = []
        acc = 0
        for t in x:
            acc = (acc + pos[t]) % spec.modulus
            out.append(pool[acc])
        return tuple(out)
    raise CorpusError(f"unknown rule {spec.rule!r}")


def _sample_input(spec: TaskSpec, vocab: Vocab, rng: np.random.Generator) -> tuple[int, ...]:
    pool = task_pool(spec, vocab)
    lo, hi = spec.input_len_range
    m = int(rng.integers(lo, hi + 1))
    if spec.rule == "majority_vote":
        if spec.n_classes > len(pool):
            raise CorpusError(f"{spec.task_id}: n_classes exceeds the task pool")
        sub = pool[: spec.n_classes]
        return tuple(sub[i] for i in rng.integers(0, len(sub), size=m))
    if spec.rule == "marker_parity":
        # marker with probability 1/2 keeps the two parity classes balanced
        others = pool[1:]
        toks = []
        for is_marker in rng.random(m) < 0.5:
            toks.append(pool[0] if is_marker else others[int(rng.integers(0, len(others)))])
        return tuple(toks)
    if spec.rule == "modular_add":
        if spec.modulus > len(pool):
            raise CorpusError(f"{spec.task_id}: modulus exceeds the task pool")
        sub = pool[: spec.modulus]
        return tuple(sub[i] for i in rng.integers(0, len(sub), size=m))
    return tuple(pool[i] for i in rng.integers(0, len(pool), size=m))


def _random_response(spec: TaskSpec, vocab: Vocab, n_content: int, rng: np.random.Generator) -> tuple[int, ...]:
    """A uniformly random valid response (content tokens, no eos)."""
    if spec.family == "classification":
        return (vocab.label_ids[int(rng.integers(0, spec.n_classes))],)
    pool = task_pool(spec, vocab)
    if spec.rule == "modular_add":
        pool = pool[: spec.modulus]
    return tuple(pool[i] for i in rng.integers(0, len(pool), size=n_content))


def generate_task(spec: TaskSpec, vocab: Vocab, sizes: Mapping[str, int]) -> list[Example]:
    """All examples of one task: train examples first, then eval."""
    rng = np.random.default_rng(spec.seed)
    out: list[Example] = []
    for split in SPLITS:
        for _ in range(int(sizes.get(split, 0))):
            x = _sample_input(spec, vocab, rng)
            y = apply_rule(spec, vocab, x) + (vocab.eos_id,)
            ex = Example(task_id=spec.task_id, x=x, y=y, tier=spec.tier,
                         noisy=False, split=split)
            ex.validate(vocab)
            out.append(ex)
    return out


def generate_corpus(specs: Sequence[TaskSpec], sizes: Mapping[str, int],
                    vocab: Vocab | None = None) -> list[Example]:
    """Generate every task in ``specs``; a pure function of the task seeds."""
    if not specs:
        raise CorpusError("at least one TaskSpec required")
    ids = [s.task_id for s in specs]
    if len(set(ids)) != len(ids):
        raise CorpusError("task_ids must be distinct")
    vocab = vocab or default_vocab()
    out: list[Example] = []
    for spec in specs:
        out.extend(generate_task(spec, vocab, sizes))
    return out


def inject_label_noise(examples: Sequence[Example], rho: float, seed: int,
                       specs: Sequence[TaskSpec], vocab: Vocab | None = None) -> list[Example]:
    """Replace each train response by a random valid one with probability rho.

    Decision draws come from the first child of ``SeedSequence(seed)``, one
    uniform per train example in input order; replacement draws come from the
    second child.  This keeps the selection reproducible by an independent
    re-draw regardless of how many values each replacement consumes.
    """
    if not 0.0 <= rho <= 1.0:
        raise CorpusError("rho must be in [0, 1]")
    vocab = vocab or default_vocab()
    by_id = {s.task_id: s for s in specs}
    decide_ss, replace_ss = np.random.SeedSequence(seed).spawn(2)
    decide = np.random.default_rng(decide_ss)
    replacer = np.random.default_rng(replace_ss)
    out: list[Example] = []
    for ex in examples:
        if ex.split != "train":
            out.append(ex)
            continue
        if decide.random() < rho:
            spec = by_id[ex.task_id]
            content = _random_response(spec, vocab, len(ex.y) - 1, replacer)
            out.append(replace(ex, y=content + (vocab.eos_id,), noisy=True))
        else:
            out.append(ex)
    return out


def save_corpus(examples: Iterable[Example], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({
                "task_id": ex.task_id,
                "x": list(ex.x),
                "y": list(ex.y),
                "tier": ex.tier,
                "noisy": ex.noisy,
                "split": ex.split,
            }) + "\n")


_FIELD_TYPES = {
    "task_id": str, "x": list, "y": list, "tier": str, "noisy": bool, "split": str,
}


def load_corpus(path: str | Path, vocab: Vocab) -> list[Example]:
    out: list[Example] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: not valid JSON ({exc.msg})") from None
            for field, typ in _FIELD_TYPES.items():
                if field not in raw:
                    raise CorpusError(f"line {lineno}: missing field {field!r}")
                if not isinstance(raw[field], typ):
                    raise CorpusError(f"line {lineno}: field {field!r} has wrong type")
            for field in ("x", "y"):
                for t in raw[field]:
                    if not isinstance(t, int) or not 0 <= t < vocab.size:
                        raise CorpusError(f"line {lineno}: field {field!r} has bad token id {t!r}")
            ex = Example(task_id=raw["task_id"], x=tuple(raw["x"]), y=tuple(raw["y"]),
                         tier=raw["tier"], noisy=raw["noisy"], split=raw["split"])
            try:
                ex.validate(vocab)
            except CorpusError as exc:
                raise CorpusError(f"line {lineno}: {exc}") from None
            out.append(ex)
    return out


def default_task_specs(noise_rate: float = 0.15, base_seed: int = 7000) -> list[TaskSpec]:
    """The default mixture: three classification and three generation tasks.

    Each task owns a disjoint nine-token pool so inputs identify the task.
    """
    return [
        TaskSpec("cls_bucket", "classification", "first_token_bucket", "easy",
                 (6, 10), n_classes=4, noise_rate=noise_rate, seed=base_seed + 1,
                 pool=(0, 9)),
        TaskSpec("cls_vote", "classification", "majority_vote", "medium",
                 (7, 11), n_classes=3, noise_rate=noise_rate, seed=base_seed + 2,
                 pool=(9, 9)),
        TaskSpec("cls_parity", "classification", "marker_parity", "hard",
                 (10, 14), n_classes=2, noise_rate=noise_rate, seed=base_seed + 3,
                 pool=(18, 9)),
        TaskSpec("gen_copy", "generation", "copy", "easy",
                 (4, 8), response_len_range=(4, 8), noise_rate=noise_rate, seed=base_seed + 4,
                 pool=(27, 9)),
        TaskSpec("gen_reverse", "generation", "reverse", "medium",
                 (4, 8), response_len_range=(4, 8), noise_rate=noise_rate, seed=base_seed + 5,
                 pool=(36, 9)),
        TaskSpec("gen_modsum", "generation", "modular_add", "hard",
                 (4, 8), response_len_range=(4, 8), noise_rate=noise_rate, seed=base_seed + 6,
                 pool=(45, 9), modulus=8),
    ]
