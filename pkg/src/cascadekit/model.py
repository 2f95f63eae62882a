"""Minimal decoder-only autoregressive LM in float64 numpy.

Pre-norm transformer with learned positional embeddings, causal attention,
GELU feed-forward blocks, and weight-tied input/output embeddings.  Forward,
greedy decoding, and exact analytic gradients are all implemented here; the
loss definitions themselves live in :mod:`cascadekit.losses`.

Sequences are packed as ``[bos] x [sep] y`` and log-probabilities are defined
only on response positions: row ``i`` of a teacher-forced output is the log
distribution of ``y_i`` given ``x`` and the gold prefix ``y_{<i}``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import erf

from . import losses

LN_EPS = 1e-5
CHECKPOINT_VERSION = 1
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ModelError(ValueError):
    """Invalid configuration, input, or checkpoint."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.n_layers < 1:
            raise ModelError("n_layers must be >= 1")
        if self.n_heads < 1:
            raise ModelError("n_heads must be >= 1")
        if self.d_model < 4 or self.d_model % self.n_heads != 0:
            raise ModelError("d_model must be >= 4 and a multiple of n_heads")
        if self.d_ff < 4:
            raise ModelError("d_ff must be >= 4")
        if self.vocab_size < 2:
            raise ModelError("vocab_size must be >= 2")
        if self.max_seq_len < 3:
            raise ModelError("max_seq_len must be >= 3")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "d_model": self.d_model,
            "n_heads": self.n_heads, "d_ff": self.d_ff,
            "vocab_size": self.vocab_size, "max_seq_len": self.max_seq_len,
            "init_seed": self.init_seed,
        }


@dataclass
class Model:
    """Parameter store plus config.  Immutable during inference by convention."""

    config: ModelConfig
    params: dict[str, np.ndarray]

    @property
    def param_count(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def validate(self) -> None:
        for name, arr in self.params.items():
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"non-finite values in parameter {name!r}")


@dataclass(frozen=True)
class DecodeResult:
    y_hat: tuple[int, ...]
    token_logprobs: tuple[float, ...]
    stopped_by: str  # "eos" | "max_len"

    def __post_init__(self) -> None:
        if len(self.y_hat) != len(self.token_logprobs):
            raise ModelError("y_hat and token_logprobs must have equal length")


def _param_names(cfg: ModelConfig) -> list[str]:
    names = ["emb", "pos"]
    for i in range(cfg.n_layers):
        names += [f"l{i}.ln1.g", f"l{i}.ln1.b"]
        names += [f"l{i}.attn.{n}" for n in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")]
        names += [f"l{i}.ln2.g", f"l{i}.ln2.b"]
        names += [f"l{i}.ffn.{n}" for n in ("w1", "b1", "w2", "b2")]
    names += ["lnf.g", "lnf.b"]
    return names


def init_model(config: ModelConfig) -> Model:
    """Seeded parameter init: two calls with equal config are bitwise equal."""
    rng = np.random.default_rng(config.init_seed)
    d, f, v, p = config.d_model, config.d_ff, config.vocab_size, config.max_seq_len
    std = 0.02
    resid_std = std / np.sqrt(2.0 * config.n_layers)
    params: dict[str, np.ndarray] = {}
    params["emb"] = rng.normal(0.0, std, size=(v, d))
    params["pos"] = rng.normal(0.0, std, size=(p, d))
    for i in range(config.n_layers):
        params[f"l{i}.ln1.g"] = np.ones(d)
        params[f"l{i}.ln1.b"] = np.zeros(d)
        params[f"l{i}.attn.wq"] = rng.normal(0.0, std, size=(d, d))
        params[f"l{i}.attn.wk"] = rng.normal(0.0, std, size=(d, d))
        params[f"l{i}.attn.wv"] = rng.normal(0.0, std, size=(d, d))
        params[f"l{i}.attn.wo"] = rng.normal(0.0, resid_std, size=(d, d))
        for n in ("bq", "bk", "bv", "bo"):
            params[f"l{i}.attn.{n}"] = np.zeros(d)
        params[f"l{i}.ln2.g"] = np.ones(d)
        params[f"l{i}.ln2.b"] = np.zeros(d)
        params[f"l{i}.ffn.w1"] = rng.normal(0.0, std, size=(d, f))
        params[f"l{i}.ffn.b1"] = np.zeros(f)
        params[f"l{i}.ffn.w2"] = rng.normal(0.0, resid_std, size=(f, d))
        params[f"l{i}.ffn.b2"] = np.zeros(d)
    params["lnf.g"] = np.ones(d)
    params["lnf.b"] = np.zeros(d)
    model = Model(config=config, params=params)
    model.validate()
    return model


# ---------------------------------------------------------------------------
# forward / backward


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    istd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * istd
    return g * xhat + b, (xhat, istd)


def _layernorm_backward(dy: np.ndarray, cache, g: np.ndarray):
    xhat, istd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = istd * (dxhat
                 - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


def _forward(model: Model, tokens: np.ndarray, need_cache: bool = False):
    """Logits [B, T, V] for packed token ids [B, T] (int array)."""
    cfg, P = model.config, model.params
    b, t = tokens.shape
    if t > cfg.max_seq_len:
        raise ModelError(f"packed length {t} exceeds max_seq_len {cfg.max_seq_len}")
    scale = 1.0 / np.sqrt(cfg.head_dim)
    causal = np.tril(np.ones((t, t), dtype=bool))

    h = P["emb"][tokens] + P["pos"][:t]
    cache: dict = {"tokens": tokens, "layers": []}
    for i in range(cfg.n_layers):
        lc: dict = {}
        a, lc["ln1"] = _layernorm(h, P[f"l{i}.ln1.g"], P[f"l{i}.ln1.b"])
        q = _split_heads(a @ P[f"l{i}.attn.wq"] + P[f"l{i}.attn.bq"], cfg.n_heads)
        k = _split_heads(a @ P[f"l{i}.attn.wk"] + P[f"l{i}.attn.bk"], cfg.n_heads)
        v = _split_heads(a @ P[f"l{i}.attn.wv"] + P[f"l{i}.attn.bv"], cfg.n_heads)
        scores = np.where(causal, (q @ k.transpose(0, 1, 3, 2)) * scale, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        att = e / e.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(att @ v)
        o = ctx @ P[f"l{i}.attn.wo"] + P[f"l{i}.attn.bo"]
        h = h + o
        a2, lc["ln2"] = _layernorm(h, P[f"l{i}.ln2.g"], P[f"l{i}.ln2.b"])
        f1 = a2 @ P[f"l{i}.ffn.w1"] + P[f"l{i}.ffn.b1"]
        g = _gelu(f1)
        h = h + g @ P[f"l{i}.ffn.w2"] + P[f"l{i}.ffn.b2"]
        if need_cache:
            lc.update(a=a, q=q, k=k, v=v, att=att, ctx=ctx, a2=a2, f1=f1, g=g)
            cache["layers"].append(lc)
    hf, lnf_cache = _layernorm(h, P["lnf.g"], P["lnf.b"])
    logits = hf @ P["emb"].T
    if need_cache:
        cache.update(lnf=lnf_cache, hf=hf)
        return logits, cache
    return logits


def _backward(model: Model, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients for every parameter given d(loss)/d(logits)."""
    cfg, P = model.config, model.params
    tokens = cache["tokens"]
    b, t = tokens.shape
    d = cfg.d_model
    scale = 1.0 / np.sqrt(cfg.head_dim)
    grads = {name: np.zeros_like(arr) for name, arr in P.items()}

    hf = cache["hf"]
    grads["emb"] += dlogits.reshape(-1, cfg.vocab_size).T @ hf.reshape(-1, d)
    dhf = dlogits @ P["emb"]
    dh, grads["lnf.g"], grads["lnf.b"] = _layernorm_backward(dhf, cache["lnf"], P["lnf.g"])

    for i in reversed(range(cfg.n_layers)):
        lc = cache["layers"][i]
        # feed-forward block
        dg = dh @ P[f"l{i}.ffn.w2"].T
        grads[f"l{i}.ffn.w2"] = lc["g"].reshape(-1, cfg.d_ff).T @ dh.reshape(-1, d)
        grads[f"l{i}.ffn.b2"] = dh.reshape(-1, d).sum(axis=0)
        df1 = dg * _gelu_grad(lc["f1"])
        grads[f"l{i}.ffn.w1"] = lc["a2"].reshape(-1, d).T @ df1.reshape(-1, cfg.d_ff)
        grads[f"l{i}.ffn.b1"] = df1.reshape(-1, cfg.d_ff).sum(axis=0)
        da2 = df1 @ P[f"l{i}.ffn.w1"].T
        dx2, grads[f"l{i}.ln2.g"], grads[f"l{i}.ln2.b"] = _layernorm_backward(
            da2, lc["ln2"], P[f"l{i}.ln2.g"])
        dh = dh + dx2
        # attention block
        do = dh
        grads[f"l{i}.attn.wo"] = lc["ctx"].reshape(-1, d).T @ do.reshape(-1, d)
        grads[f"l{i}.attn.bo"] = do.reshape(-1, d).sum(axis=0)
        dctx = _split_heads(do @ P[f"l{i}.attn.wo"].T, cfg.n_heads)
        att, q, k, v = lc["att"], lc["q"], lc["k"], lc["v"]
        datt = dctx @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dctx
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dq = (ds @ k) * scale
        dk = (ds.transpose(0, 1, 3, 2) @ q) * scale
        a = lc["a"].reshape(-1, d)
        da = np.zeros((b * t, d))
        for w_name, b_name, dz in (("wq", "bq", dq), ("wk", "bk", dk), ("wv", "bv", dv)):
            dz_m = _merge_heads(dz).reshape(-1, d)
            grads[f"l{i}.attn.{w_name}"] = a.T @ dz_m
            grads[f"l{i}.attn.{b_name}"] = dz_m.sum(axis=0)
            da += dz_m @ P[f"l{i}.attn.{w_name}"].T
        dx1, grads[f"l{i}.ln1.g"], grads[f"l{i}.ln1.b"] = _layernorm_backward(
            da.reshape(b, t, d), lc["ln1"], P[f"l{i}.ln1.g"])
        dh = dh + dx1

    grads["pos"][:t] = dh.sum(axis=0)
    np.add.at(grads["emb"], tokens.reshape(-1), dh.reshape(-1, d))
    return grads


# ---------------------------------------------------------------------------
# packing and teacher-forced scoring


@dataclass
class PackedBatch:
    tokens: np.ndarray          # [B, T] int64, pad-filled
    pred_rows: np.ndarray       # [K] batch index of each response position
    pred_cols: np.ndarray       # [K] time index whose logits predict the target
    targets: np.ndarray         # [K] target token ids, example-major order
    offsets: np.ndarray         # [B+1] response-token offsets into K
    field_order: tuple = field(default=(), repr=False)


def _as_xy(example) -> tuple[Sequence[int], Sequence[int]]:
    if hasattr(example, "x"):
        return example.x, example.y
    x, y = example
    return x, y


def pack_batch(examples: Sequence, bos_id: int, sep_id: int, pad_id: int,
               max_seq_len: int) -> PackedBatch:
    pairs = [_as_xy(e) for e in examples]
    lens = [len(x) + len(y) + 2 for x, y in pairs]
    t = max(lens)
    if t > max_seq_len:
        raise ModelError(f"packed length {t} exceeds max_seq_len {max_seq_len}")
    tokens = np.full((len(pairs), t), pad_id, dtype=np.int64)
    rows, cols, targets, offsets = [], [], [], [0]
    for bi, (x, y) in enumerate(pairs):
        m, n = len(x), len(y)
        tokens[bi, 0] = bos_id
        tokens[bi, 1:1 + m] = x
        tokens[bi, 1 + m] = sep_id
        tokens[bi, 2 + m:2 + m + n] = y
        rows.extend([bi] * n)
        cols.extend(range(m + 1, m + 1 + n))
        targets.extend(y)
        offsets.append(offsets[-1] + n)
    return PackedBatch(tokens=tokens, pred_rows=np.asarray(rows), pred_cols=np.asarray(cols),
                       targets=np.asarray(targets), offsets=np.asarray(offsets))


def _log_softmax(rows: np.ndarray) -> np.ndarray:
    m = rows.max(axis=-1, keepdims=True)
    return rows - (m + np.log(np.exp(rows - m).sum(axis=-1, keepdims=True)))


def forward_teacher_forced_batch(model: Model, examples: Sequence,
                                 bos_id: int, sep_id: int, pad_id: int) -> list[np.ndarray]:
    """Per-example [N_i, V] response log-distributions under gold prefixes."""
    batch = pack_batch(examples, bos_id, sep_id, pad_id, model.config.max_seq_len)
    logits = _forward(model, batch.tokens)
    logp = _log_softmax(logits[batch.pred_rows, batch.pred_cols])
    return [logp[batch.offsets[i]:batch.offsets[i + 1]] for i in range(len(examples))]


def forward_teacher_forced(model: Model, x: Sequence[int], y: Sequence[int],
                           bos_id: int, sep_id: int, pad_id: int) -> np.ndarray:
    return forward_teacher_forced_batch(model, [(x, y)], bos_id, sep_id, pad_id)[0]


# ---------------------------------------------------------------------------
# greedy decoding


def greedy_decode_batch(model: Model, xs: Sequence[Sequence[int]], max_new_tokens: int,
                        bos_id: int, sep_id: int, pad_id: int, eos_id: int) -> list[DecodeResult]:
    """Lockstep greedy decoding; ties broken toward the lowest token id.

    Each row stops after emitting eos, at ``max_new_tokens``, or when it hits
    the model's context limit, whichever comes first.
    """
    if max_new_tokens < 1:
        raise ModelError("max_new_tokens must be >= 1")
    cfg = model.config
    n = len(xs)
    prefix_lens = np.array([len(x) + 2 for x in xs])
    budgets = np.minimum(max_new_tokens, cfg.max_seq_len - prefix_lens)
    if np.any(budgets < 1):
        raise ModelError("prefix leaves no room to decode within max_seq_len")
    t_max = int((prefix_lens + budgets).max())
    tokens = np.full((n, t_max), pad_id, dtype=np.int64)
    for bi, x in enumerate(xs):
        tokens[bi, 0] = bos_id
        tokens[bi, 1:1 + len(x)] = x
        tokens[bi, 1 + len(x)] = sep_id
    lens = prefix_lens.copy()
    emitted: list[list[int]] = [[] for _ in range(n)]
    logprobs: list[list[float]] = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    stopped = ["max_len"] * n
    while not done.all():
        cur_t = int(lens[~done].max())
        logits = _forward(model, tokens[:, :cur_t])
        active = np.flatnonzero(~done)
        rows = logits[active, lens[active] - 1]
        logp = _log_softmax(rows)
        choices = np.argmax(rows, axis=-1)
        for j, bi in enumerate(active):
            tok = int(choices[j])
            emitted[bi].append(tok)
            logprobs[bi].append(float(logp[j, tok]))
            tokens[bi, lens[bi]] = tok
            lens[bi] += 1
            if tok == eos_id:
                done[bi] = True
                stopped[bi] = "eos"
            elif len(emitted[bi]) >= budgets[bi]:
                done[bi] = True
    return [DecodeResult(y_hat=tuple(emitted[i]), token_logprobs=tuple(logprobs[i]),
                         stopped_by=stopped[i]) for i in range(n)]


def greedy_decode(model: Model, x: Sequence[int], max_new_tokens: int,
                  bos_id: int, sep_id: int, pad_id: int, eos_id: int) -> DecodeResult:
    return greedy_decode_batch(model, [x], max_new_tokens, bos_id, sep_id, pad_id, eos_id)[0]


# ---------------------------------------------------------------------------
# loss + gradient


def loss_and_grad(model: Model, examples: Sequence, loss_spec: "losses.LossSpec",
                  bos_id: int, sep_id: int, pad_id: int,
                  teacher_argmax: np.ndarray | None = None,
                  teacher_logprobs: np.ndarray | None = None):
    """Batch loss (per-unmasked-token normalized) and exact parameter gradients.

    ``teacher_argmax``/``teacher_logprobs`` are flat over the batch's response
    tokens in example-major order, matching the packing here.  Returns
    ``(loss, grads, aux)`` where aux carries the mask and mask fraction.
    """
    if loss_spec.needs_teacher and teacher_argmax is None:
        raise losses.LossError(f"loss {loss_spec.kind!r} requires teacher outputs")
    if loss_spec.needs_teacher_dist and teacher_logprobs is None:
        raise losses.LossError(f"loss {loss_spec.kind!r} requires teacher distributions")
    batch = pack_batch(examples, bos_id, sep_id, pad_id, model.config.max_seq_len)
    logits, cache = _forward(model, batch.tokens, need_cache=True)
    rows = logits[batch.pred_rows, batch.pred_cols]
    logp = _log_softmax(rows)
    student_argmax = np.argmax(rows, axis=-1)
    loss, drows, alpha = losses.batch_loss_and_grad(
        loss_spec, logp, batch.targets, student_argmax, teacher_argmax, teacher_logprobs)
    dlogits = np.zeros_like(logits)
    dlogits[batch.pred_rows, batch.pred_cols] = drows
    grads = _backward(model, cache, dlogits)
    aux = {"alpha": alpha, "mask_fraction": float(1.0 - alpha.mean()) if alpha.size else 0.0,
           "n_tokens": int(batch.targets.size)}
    return loss, grads, aux


# ---------------------------------------------------------------------------
# checkpoint I/O


def serialize_model(model: Model) -> bytes:
    manifest = [[name, list(model.params[name].shape)] for name in _param_names(model.config)]
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "manifest": manifest,
    }, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes()
                       for name, _ in manifest)
    return struct.pack("<Q", len(header)) + header + payload


def save_model(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(serialize_model(model))


def load_model(path: str | Path) -> Model:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise ModelError(f"checkpoint {path} is truncated")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if len(blob) < 8 + header_len:
        raise ModelError(f"checkpoint {path} is truncated")
    try:
        header = json.loads(blob[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelError(f"checkpoint {path} has a corrupt header: {exc}") from None
    if not isinstance(header, dict):
        raise ModelError(f"checkpoint {path} has a corrupt header")
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {header.get('format_version')!r}")
    try:
        config = ModelConfig(**header["config"])
    except (KeyError, TypeError) as exc:
        raise ModelError(f"checkpoint {path} has a bad config block: {exc}") from None
    if [name for name, _ in header["manifest"]] != _param_names(config):
        raise ModelError("checkpoint manifest does not match its config")
    params: dict[str, np.ndarray] = {}
    offset = 8 + header_len
    for name, shape in header["manifest"]:
        n_bytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        chunk = blob[offset:offset + n_bytes]
        if len(chunk) != n_bytes:
            raise ModelError(f"checkpoint {path} is truncated in array {name!r}")
        params[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += n_bytes
    if offset != len(blob):
        raise ModelError(f"checkpoint {path} has {len(blob) - offset} trailing bytes")
    model = Model(config=config, params=params)
    model.validate()
    return model


def model_checksum(model: Model) -> str:
    return hashlib.sha256(serialize_model(model)).hexdigest()


def file_checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
