"""Seeded mini-batch training loop and teacher output caching.

Training is deterministic given (initial model, corpus order, config, seed):
batch order comes from a seeded generator, both optimizers are elementwise
numpy updates, and wall-clock time appears only in the log file, never in
model state.  Teacher outputs are precomputed once into a
:class:`TeacherCache` so student runs never re-execute the large model.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as model_mod
from .corpus import Vocab
from .losses import LossSpec

OPTIMIZERS = ("adaptive_elementwise", "sgd_momentum")
LR_SCHEDULES = ("constant", "cosine_decay")
TRAIN_LOG_COLUMNS = ("step", "loss", "masked_fraction", "lr", "wall_ms")
CACHE_MAGIC = b"TCH1"


class TrainerError(ValueError):
    """Invalid training configuration or mismatched cache."""


class TrainingDivergedError(RuntimeError):
    """Raised when the loss stops being finite; message names the step."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings; ``eval_every``/``checkpoint_dir`` control snapshots.

    A mid-run checkpoint is written every ``eval_every`` steps when both
    fields are set; the final model is always returned in memory.
    """

    steps: int
    batch_size: int
    lr: float
    optimizer: str = "adaptive_elementwise"
    lr_schedule: str = "cosine_decay"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    eval_every: int | None = None
    checkpoint_dir: str | None = None

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise TrainerError("steps must be >= 1")
        if self.batch_size < 1:
            raise TrainerError("batch_size must be >= 1")
        if not (self.lr > 0.0):
            raise TrainerError("lr must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise TrainerError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise TrainerError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.eval_every is not None and self.eval_every < 1:
            raise TrainerError("eval_every must be >= 1")


def lr_at(config: TrainConfig, step_index: int) -> float:
    """Learning rate for a 0-based step index under the configured schedule."""
    if config.lr_schedule == "constant":
        return config.lr
    return config.lr * 0.5 * (1.0 + np.cos(np.pi * step_index / config.steps))


# ---------------------------------------------------------------------------
# teacher cache


@dataclass
class TeacherCache:
    """Teacher-forced outputs of a frozen model over a fixed example list.

    Row blocks align positionally with the example list the cache was built
    from; ``offsets[i]:offsets[i+1]`` spans example ``i``'s response tokens.
    """

    logprobs: np.ndarray        # [total_tokens, V]
    offsets: np.ndarray         # [n_examples + 1]
    argmax: np.ndarray          # [total_tokens]
    teacher_checksum: str

    def __post_init__(self) -> None:
        if self.offsets[0] != 0 or self.offsets[-1] != self.logprobs.shape[0]:
            raise TrainerError("cache offsets do not span the logprob rows")
        if self.argmax.shape != (self.logprobs.shape[0],):
            raise TrainerError("cache argmax length does not match logprobs")

    @property
    def n_examples(self) -> int:
        return len(self.offsets) - 1

    @property
    def vocab_size(self) -> int:
        return self.logprobs.shape[1]

    def rows(self, example_index: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.offsets[example_index], self.offsets[example_index + 1]
        return self.argmax[lo:hi], self.logprobs[lo:hi]

    def gather(self, example_indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Flat (argmax, logprobs) for a batch, in the given example order."""
        spans = [np.arange(self.offsets[i], self.offsets[i + 1]) for i in example_indices]
        idx = np.concatenate(spans) if spans else np.empty(0, dtype=np.int64)
        return self.argmax[idx], self.logprobs[idx]


def build_teacher_cache(teacher: model_mod.Model, examples: Sequence, vocab: Vocab,
                        batch_size: int = 64) -> TeacherCache:
    """Run the teacher once over every example, teacher-forced on gold targets."""
    if teacher.config.vocab_size != vocab.size:
        raise TrainerError("teacher vocab_size does not match the corpus vocab")
    blocks: list[np.ndarray] = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        blocks.extend(model_mod.forward_teacher_forced_batch(
            teacher, chunk, vocab.bos_id, vocab.sep_id, vocab.pad_id))
    lengths = [b.shape[0] for b in blocks]
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    logprobs = np.concatenate(blocks) if blocks else np.empty((0, vocab.size))
    return TeacherCache(logprobs=logprobs, offsets=offsets,
                        argmax=np.argmax(logprobs, axis=1) if logprobs.size
                        else np.empty(0, dtype=np.int64),
                        teacher_checksum=model_mod.model_checksum(teacher))


def save_teacher_cache(cache: TeacherCache, path: str | Path) -> None:
    header = json.dumps({
        "teacher_checksum": cache.teacher_checksum,
        "n_examples": cache.n_examples,
        "shape": list(cache.logprobs.shape),
    }, sort_keys=True).encode("utf-8")
    payload = (np.ascontiguousarray(cache.logprobs, dtype="<f8").tobytes()
               + np.ascontiguousarray(cache.offsets, dtype="<i8").tobytes()
               + np.ascontiguousarray(cache.argmax, dtype="<i8").tobytes())
    Path(path).write_bytes(CACHE_MAGIC + struct.pack("<Q", len(header)) + header + payload)


def load_teacher_cache(path: str | Path) -> TeacherCache:
    blob = Path(path).read_bytes()
    if blob[:4] != CACHE_MAGIC or len(blob) < 12:
        raise TrainerError(f"{path} is not a teacher cache file")
    (header_len,) = struct.unpack("<Q", blob[4:12])
    header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    total, v = header["shape"]
    n = header["n_examples"]
    need = 12 + header_len + total * v * 8 + (n + 1) * 8 + total * 8
    if len(blob) != need:
        raise TrainerError(f"teacher cache {path} has wrong payload size")
    off = 12 + header_len
    logprobs = np.frombuffer(blob[off:off + total * v * 8], dtype="<f8").reshape(total, v).copy()
    off += total * v * 8
    offsets = np.frombuffer(blob[off:off + (n + 1) * 8], dtype="<i8").copy()
    off += (n + 1) * 8
    argmax = np.frombuffer(blob[off:], dtype="<i8").copy()
    return TeacherCache(logprobs=logprobs, offsets=offsets, argmax=argmax,
                        teacher_checksum=header["teacher_checksum"])


def _check_cache_alignment(cache: TeacherCache, examples: Sequence) -> None:
    if cache.n_examples != len(examples):
        raise TrainerError(f"cache holds {cache.n_examples} examples, corpus has {len(examples)}")
    lengths = np.diff(cache.offsets)
    for i, ex in enumerate(examples):
        if lengths[i] != len(ex.y):
            raise TrainerError(f"cache row count mismatch at example {i}")


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: model_mod.Model
    log: list[dict]
    final_loss: float


def _batch_order(n: int, batch_size: int, steps: int, seed: int):
    """Yield ``steps`` index arrays from repeated seeded shuffles of range(n)."""
    rng = np.random.default_rng(seed)
    emitted = 0
    while emitted < steps:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            if emitted == steps:
                return
            yield perm[start:start + batch_size]
            emitted += 1


def train(start_model: model_mod.Model, examples: Sequence, loss_spec: LossSpec,
          config: TrainConfig, vocab: Vocab, seed: int,
          teacher_cache: TeacherCache | None = None,
          log_path: str | Path | None = None) -> TrainResult:
    """Train a copy of ``start_model``; the input model is left untouched.

    Losses that consult a teacher require ``teacher_cache`` built over the
    same example list in the same order.
    """
    if not examples:
        raise TrainerError("cannot train on an empty example list")
    if start_model.config.vocab_size != vocab.size:
        raise TrainerError("model vocab_size does not match the corpus vocab")
    if loss_spec.needs_teacher:
        if teacher_cache is None:
            raise TrainerError(f"loss {loss_spec.kind!r} requires a teacher cache")
        _check_cache_alignment(teacher_cache, examples)
        if teacher_cache.vocab_size != vocab.size:
            raise TrainerError("teacher cache vocab_size does not match the corpus vocab")

    params = {k: v.copy() for k, v in start_model.params.items()}
    net = model_mod.Model(config=start_model.config, params=params)
    m_state = {k: np.zeros_like(v) for k, v in params.items()}
    v_state = ({k: np.zeros_like(v) for k, v in params.items()}
               if config.optimizer == "adaptive_elementwise" else None)

    log_file = open(log_path, "w") if log_path is not None else None
    if log_file is not None:
        log_file.write(",".join(TRAIN_LOG_COLUMNS) + "\n")
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    rows: list[dict] = []
    loss = float("nan")
    try:
        for step_index, batch_idx in enumerate(
                _batch_order(len(examples), config.batch_size, config.steps, seed)):
            t0 = time.perf_counter()
            batch = [examples[i] for i in batch_idx]
            t_arg = t_lp = None
            if loss_spec.needs_teacher:
                t_arg, t_lp = teacher_cache.gather(batch_idx)
            loss, grads, aux = model_mod.loss_and_grad(
                net, batch, loss_spec, vocab.bos_id, vocab.sep_id, vocab.pad_id,
                teacher_argmax=t_arg, teacher_logprobs=t_lp)
            step = step_index + 1
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at step {step}")
            lr = lr_at(config, step_index)
            if config.optimizer == "adaptive_elementwise":
                bc1 = 1.0 - config.beta1 ** step
                bc2 = 1.0 - config.beta2 ** step
                for k, g in grads.items():
                    m_state[k] = config.beta1 * m_state[k] + (1.0 - config.beta1) * g
                    v_state[k] = config.beta2 * v_state[k] + (1.0 - config.beta2) * g * g
                    params[k] -= lr * (m_state[k] / bc1) / (np.sqrt(v_state[k] / bc2) + config.eps)
            else:
                for k, g in grads.items():
                    m_state[k] = config.momentum * m_state[k] + g
                    params[k] -= lr * m_state[k]
            wall_ms = (time.perf_counter() - t0) * 1000.0
            row = {"step": step, "loss": loss, "masked_fraction": aux["mask_fraction"],
                   "lr": lr, "wall_ms": wall_ms}
            rows.append(row)
            if log_file is not None:
                log_file.write(f"{step},{loss:.17g},{aux['mask_fraction']:.17g},"
                               f"{lr:.17g},{wall_ms:.3f}\n")
            if (ckpt_dir is not None and config.eval_every is not None
                    and step % config.eval_every == 0):
                net.validate()
                model_mod.save_model(net, ckpt_dir / f"step_{step:06d}.ckpt")
    finally:
        if log_file is not None:
            log_file.close()
    net.validate()
    return TrainResult(model=net, log=rows, final_loss=float(loss))
