"""Training loop: schedules, determinism, teacher cache, divergence handling."""

import numpy as np
import pytest

from cascadekit.corpus import default_task_specs, default_vocab, generate_corpus
from cascadekit.losses import LossSpec
from cascadekit.model import ModelConfig, forward_teacher_forced, init_model, model_checksum
from cascadekit.trainer import (
    TRAIN_LOG_COLUMNS,
    TeacherCache,
    TrainConfig,
    TrainerError,
    TrainingDivergedError,
    build_teacher_cache,
    load_teacher_cache,
    lr_at,
    save_teacher_cache,
    train,
)

VOCAB = default_vocab()
SPECS = default_task_specs(base_seed=60)


def small_model(seed=0):
    cfg = ModelConfig(n_layers=1, d_model=16, n_heads=2, d_ff=32,
                      vocab_size=VOCAB.size, max_seq_len=32, init_seed=seed)
    return init_model(cfg)


def tiny_corpus(n_train=24):
    return [e for e in generate_corpus(SPECS, {"train": n_train // 6, "eval": 0}, VOCAB)]


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig(steps=10, batch_size=4, lr=0.1)
        assert cfg.optimizer == "adaptive_elementwise"
        assert cfg.lr_schedule == "cosine_decay"
        assert cfg.eval_every is None

    @pytest.mark.parametrize("kw", [
        {"steps": 0}, {"batch_size": 0}, {"lr": 0.0}, {"lr": -1.0},
        {"optimizer": "adagrad"}, {"lr_schedule": "linear"}, {"eval_every": 0},
    ])
    def test_bad_values_rejected(self, kw):
        base = dict(steps=10, batch_size=4, lr=0.1)
        base.update(kw)
        with pytest.raises(TrainerError):
            TrainConfig(**base)


class TestLrSchedule:
    def test_constant(self):
        cfg = TrainConfig(steps=10, batch_size=1, lr=0.5, lr_schedule="constant")
        assert [lr_at(cfg, i) for i in (0, 5, 9)] == [0.5, 0.5, 0.5]

    def test_cosine_starts_at_lr_and_decays(self):
        cfg = TrainConfig(steps=100, batch_size=1, lr=0.2)
        values = [lr_at(cfg, i) for i in range(100)]
        assert values[0] == 0.2
        assert all(a >= b for a, b in zip(values, values[1:]))
        np.testing.assert_allclose(lr_at(cfg, 50), 0.1, atol=1e-12)
        assert values[-1] < 0.001

    def test_cosine_half_period_shape(self):
        cfg = TrainConfig(steps=4, batch_size=1, lr=1.0)
        expected = [0.5 * (1 + np.cos(np.pi * i / 4)) for i in range(4)]
        np.testing.assert_allclose([lr_at(cfg, i) for i in range(4)], expected,
                                   atol=1e-12)


class TestTeacherCache:
    def test_rows_match_direct_forward(self):
        teacher = small_model(seed=9)
        examples = tiny_corpus()
        cache = build_teacher_cache(teacher, examples, VOCAB, batch_size=5)
        assert cache.n_examples == len(examples)
        for i in (0, 7, len(examples) - 1):
            ex = examples[i]
            lp = forward_teacher_forced(teacher, ex.x, ex.y, VOCAB.bos_id,
                                        VOCAB.sep_id, VOCAB.pad_id)
            am, got = cache.rows(i)
            np.testing.assert_allclose(got, lp, rtol=0, atol=1e-12)
            np.testing.assert_array_equal(am, np.argmax(lp, axis=1))

    def test_gather_preserves_batch_order(self):
        teacher = small_model(seed=9)
        examples = tiny_corpus()
        cache = build_teacher_cache(teacher, examples, VOCAB)
        am, lp = cache.gather([3, 0])
        am3, lp3 = cache.rows(3)
        am0, lp0 = cache.rows(0)
        np.testing.assert_array_equal(am, np.concatenate([am3, am0]))
        np.testing.assert_array_equal(lp, np.concatenate([lp3, lp0]))

    def test_checksum_binds_cache_to_teacher(self):
        teacher = small_model(seed=9)
        cache = build_teacher_cache(teacher, tiny_corpus(), VOCAB)
        assert cache.teacher_checksum == model_checksum(teacher)

    def test_save_load_roundtrip(self, tmp_path):
        cache = build_teacher_cache(small_model(seed=9), tiny_corpus(), VOCAB)
        path = tmp_path / "cache.bin"
        save_teacher_cache(cache, path)
        loaded = load_teacher_cache(path)
        np.testing.assert_array_equal(loaded.logprobs, cache.logprobs)
        np.testing.assert_array_equal(loaded.offsets, cache.offsets)
        np.testing.assert_array_equal(loaded.argmax, cache.argmax)
        assert loaded.teacher_checksum == cache.teacher_checksum

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "cache.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(TrainerError):
            load_teacher_cache(path)

    def test_truncated_payload_rejected(self, tmp_path):
        cache = build_teacher_cache(small_model(seed=9), tiny_corpus(), VOCAB)
        path = tmp_path / "cache.bin"
        save_teacher_cache(cache, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(TrainerError, match="size"):
            load_teacher_cache(path)

    def test_misaligned_offsets_rejected(self):
        with pytest.raises(TrainerError, match="offsets"):
            TeacherCache(logprobs=np.zeros((4, 3)), offsets=np.array([0, 2, 5]),
                         argmax=np.zeros(4, dtype=np.int64), teacher_checksum="x")


class TestTrainLoop:
    def test_loss_decreases_on_memorizable_data(self):
        examples = tiny_corpus()
        cfg = TrainConfig(steps=120, batch_size=8, lr=0.01)
        res = train(small_model(), examples, LossSpec("xent"), cfg, VOCAB, seed=1)
        first = np.mean([r["loss"] for r in res.log[:10]])
        last = np.mean([r["loss"] for r in res.log[-10:]])
        assert last < 0.5 * first

    def test_start_model_left_untouched(self):
        start = small_model()
        before = model_checksum(start)
        cfg = TrainConfig(steps=5, batch_size=4, lr=0.01)
        res = train(start, tiny_corpus(), LossSpec("xent"), cfg, VOCAB, seed=1)
        assert model_checksum(start) == before
        assert model_checksum(res.model) != before

    def test_same_seed_bitwise_reproducible(self):
        cfg = TrainConfig(steps=30, batch_size=4, lr=0.01)
        a = train(small_model(), tiny_corpus(), LossSpec("xent"), cfg, VOCAB, seed=3)
        b = train(small_model(), tiny_corpus(), LossSpec("xent"), cfg, VOCAB, seed=3)
        assert model_checksum(a.model) == model_checksum(b.model)
        assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]

    def test_different_seed_changes_batch_order(self):
        cfg = TrainConfig(steps=30, batch_size=4, lr=0.01)
        a = train(small_model(), tiny_corpus(), LossSpec("xent"), cfg, VOCAB, seed=3)
        b = train(small_model(), tiny_corpus(), LossSpec("xent"), cfg, VOCAB, seed=4)
        assert model_checksum(a.model) != model_checksum(b.model)

    def test_sgd_momentum_also_learns(self):
        cfg = TrainConfig(steps=120, batch_size=8, lr=0.05, optimizer="sgd_momentum")
        res = train(small_model(), tiny_corpus(), LossSpec("xent"), cfg, VOCAB, seed=1)
        first = np.mean([r["loss"] for r in res.log[:10]])
        last = np.mean([r["loss"] for r in res.log[-10:]])
        assert last < first

    def test_log_file_format(self, tmp_path):
        cfg = TrainConfig(steps=12, batch_size=4, lr=0.01)
        log_path = tmp_path / "train.csv"
        res = train(small_model(), tiny_corpus(), LossSpec("xent"), cfg, VOCAB,
                    seed=1, log_path=log_path)
        lines = log_path.read_text().strip().splitlines()
        assert lines[0] == ",".join(TRAIN_LOG_COLUMNS)
        assert len(lines) == 13
        first = lines[1].split(",")
        assert int(first[0]) == 1
        assert float(first[1]) == res.log[0]["loss"]

    def test_masked_fraction_logged_for_cat_loss(self):
        examples = tiny_corpus()
        teacher = small_model(seed=9)
        cache = build_teacher_cache(teacher, examples, VOCAB)
        cfg = TrainConfig(steps=10, batch_size=4, lr=0.01)
        res = train(small_model(), examples, LossSpec("cat_xent"), cfg, VOCAB,
                    seed=1, teacher_cache=cache)
        fracs = [r["masked_fraction"] for r in res.log]
        assert all(0.0 <= f <= 1.0 for f in fracs)
        assert max(fracs) > 0.0

    def test_checkpoints_written_at_eval_every(self, tmp_path):
        cfg = TrainConfig(steps=10, batch_size=4, lr=0.01, eval_every=4,
                          checkpoint_dir=str(tmp_path / "ckpts"))
        train(small_model(), tiny_corpus(), LossSpec("xent"), cfg, VOCAB, seed=1)
        names = sorted(p.name for p in (tmp_path / "ckpts").iterdir())
        assert names == ["step_000004.ckpt", "step_000008.ckpt"]

    def test_teacher_loss_requires_cache(self):
        cfg = TrainConfig(steps=5, batch_size=4, lr=0.01)
        with pytest.raises(TrainerError, match="cache"):
            train(small_model(), tiny_corpus(), LossSpec("cat_xent"), cfg, VOCAB, seed=1)

    def test_cache_example_count_must_match(self):
        examples = tiny_corpus()
        cache = build_teacher_cache(small_model(seed=9), examples[:-2], VOCAB)
        cfg = TrainConfig(steps=5, batch_size=4, lr=0.01)
        with pytest.raises(TrainerError, match="examples"):
            train(small_model(), examples, LossSpec("cat_xent"), cfg, VOCAB,
                  seed=1, teacher_cache=cache)

    def test_cache_row_shape_must_match(self):
        examples = tiny_corpus()
        reordered = list(reversed(examples))
        cache = build_teacher_cache(small_model(seed=9), examples, VOCAB)
        cfg = TrainConfig(steps=5, batch_size=4, lr=0.01)
        with pytest.raises(TrainerError, match="mismatch"):
            train(small_model(), reordered, LossSpec("cat_xent"), cfg, VOCAB,
                  seed=1, teacher_cache=cache)

    def test_empty_corpus_rejected(self):
        cfg = TrainConfig(steps=5, batch_size=4, lr=0.01)
        with pytest.raises(TrainerError, match="empty"):
            train(small_model(), [], LossSpec("xent"), cfg, VOCAB, seed=1)

    def test_divergence_raises_with_step_number(self):
        cfg = TrainConfig(steps=400, batch_size=8, lr=5e4, lr_schedule="constant",
                          optimizer="sgd_momentum")
        with np.errstate(invalid="ignore", over="ignore"):
            with pytest.raises(TrainingDivergedError, match="step"):
                train(small_model(), tiny_corpus(), LossSpec("xent"), cfg, VOCAB, seed=1)
