"""Decode metrics, BLEU, deferral-curve sweeps, and curve serialization."""

import numpy as np
import pytest

from cascadekit.bleu_reference import bleu_reference
from cascadekit.cascade import ScoreRow
from cascadekit.corpus import default_task_specs, default_vocab, generate_corpus
from cascadekit.evaluation import (
    CURVE_COLUMNS,
    CurvePoint,
    EvalError,
    audc,
    bleu,
    content_tokens,
    curve_csv_text,
    dataset_xent,
    exact_match,
    example_quality,
    next_token_acc,
    quality_at_rate,
    read_curve_csv,
    render_curves_svg,
    sentence_bleu,
    sweep,
    value_at_rate,
    write_curve_csv,
)
from cascadekit.model import ModelConfig, forward_teacher_forced, init_model

VOCAB = default_vocab()
EOS = VOCAB.eos_id


class TestContentTokens:
    def test_cuts_at_first_eos(self):
        assert content_tokens((5, 6, EOS, 7), EOS) == (5, 6)

    def test_no_eos_keeps_all(self):
        assert content_tokens((5, 6, 7), EOS) == (5, 6, 7)

    def test_empty(self):
        assert content_tokens((), EOS) == ()


class TestExactMatch:
    def test_exact_terminated_decode_matches(self):
        assert exact_match((5, 6, EOS), (5, 6, EOS), EOS)

    def test_unterminated_decode_fails(self):
        assert not exact_match((5, 6), (5, 6, EOS), EOS)

    def test_content_mismatch_fails(self):
        assert not exact_match((5, 7, EOS), (5, 6, EOS), EOS)

    def test_extra_tokens_fail(self):
        assert not exact_match((5, 6, 7, EOS), (5, 6, EOS), EOS)

    def test_empty_decode_fails(self):
        assert not exact_match((), (5, EOS), EOS)


class TestBleu:
    def test_perfect_match_is_one(self):
        cands = [(5, 6, 7, 8), (9, 10)]
        np.testing.assert_allclose(bleu(cands, cands), 1.0, atol=1e-12)

    def test_matches_frozen_reference(self):
        rng = np.random.default_rng(42)
        for _ in range(30):
            n = int(rng.integers(1, 9))
            cands, refs = [], []
            for _ in range(n):
                cands.append(tuple(rng.integers(0, 15, int(rng.integers(0, 11)))))
                refs.append(tuple(rng.integers(0, 15, int(rng.integers(1, 11)))))
            np.testing.assert_allclose(bleu(cands, refs), bleu_reference(cands, refs),
                                       atol=1e-12)

    def test_hand_value_short_candidate(self):
        """One pair: candidate (5,6), reference (5,6,7).

        Unigram precision 1, bigram precision 1, higher orders fall back to
        smoothed zero counts; brevity penalty exp(1 - 3/2).
        """
        got = bleu([(5, 6)], [(5, 6, 7)])
        p3 = 1.0 / (0 + 1)
        p4 = 1.0 / (0 + 1)
        geo = (1.0 * 1.0 * p3 * p4) ** 0.25
        np.testing.assert_allclose(got, np.exp(1 - 3 / 2) * geo, atol=1e-12)

    def test_empty_candidates_score_zero(self):
        assert bleu([()], [(5, 6)]) == 0.0

    def test_no_unigram_overlap_scores_zero(self):
        assert bleu([(8, 9)], [(5, 6)]) == 0.0

    def test_corpus_not_mean_of_sentences(self):
        cands = [(5, 6, 7, 8), (9,)]
        refs = [(5, 6, 7, 8), (10,)]
        per_sentence = np.mean([sentence_bleu(c, r) for c, r in zip(cands, refs)])
        assert abs(bleu(cands, refs) - per_sentence) > 1e-6

    def test_length_mismatch_rejected(self):
        with pytest.raises(EvalError):
            bleu([(5,)], [(5,), (6,)])


class TestExampleQuality:
    def test_classification_is_exact_match(self):
        assert example_quality("classification", (5, EOS), (5, EOS), EOS) == 1.0
        assert example_quality("classification", (6, EOS), (5, EOS), EOS) == 0.0

    def test_generation_is_sentence_bleu_on_content(self):
        y_hat, y_gold = (5, 6, 7, 8, EOS), (5, 6, 7, 9, EOS)
        got = example_quality("generation", y_hat, y_gold, EOS)
        np.testing.assert_allclose(got, sentence_bleu((5, 6, 7, 8), (5, 6, 7, 9)),
                                   atol=1e-12)

    def test_unknown_family_rejected(self):
        with pytest.raises(EvalError, match="family"):
            example_quality("ranking", (5, EOS), (5, EOS), EOS)


class TestDatasetMetrics:
    def setup_method(self):
        cfg = ModelConfig(n_layers=1, d_model=16, n_heads=2, d_ff=32,
                          vocab_size=VOCAB.size, max_seq_len=32, init_seed=3)
        self.model = init_model(cfg)
        self.examples = generate_corpus(default_task_specs(base_seed=21),
                                        {"train": 2, "eval": 0}, VOCAB)

    def test_dataset_xent_matches_direct_average(self):
        got = dataset_xent(self.model, self.examples, VOCAB, batch_size=4)
        total, count = 0.0, 0
        for ex in self.examples:
            lp = forward_teacher_forced(self.model, ex.x, ex.y, VOCAB.bos_id,
                                        VOCAB.sep_id, VOCAB.pad_id)
            total += -lp[np.arange(len(ex.y)), ex.y].sum()
            count += len(ex.y)
        np.testing.assert_allclose(got, total / count, atol=1e-9)

    def test_next_token_acc_matches_direct_count(self):
        got = next_token_acc(self.model, self.examples, VOCAB, batch_size=4)
        hits, count = 0, 0
        for ex in self.examples:
            lp = forward_teacher_forced(self.model, ex.x, ex.y, VOCAB.bos_id,
                                        VOCAB.sep_id, VOCAB.pad_id)
            hits += int((np.argmax(lp, axis=1) == np.asarray(ex.y)).sum())
            count += len(ex.y)
        np.testing.assert_allclose(got, hits / count, atol=1e-12)


def hand_rows():
    """Four examples with distinct scores and known qualities."""
    return [
        ScoreRow("a/0", 0.1, True, True, 1.0, 1.0, 2),
        ScoreRow("a/1", 0.5, False, True, 0.0, 1.0, 2),
        ScoreRow("b/0", 0.9, False, False, 0.25, 0.5, 5),
        ScoreRow("b/1", 1.3, False, True, 0.0, 1.0, 6),
    ]


class TestSweep:
    def test_hand_curve(self):
        """Thresholds at score midpoints defer suffixes of the score order."""
        pts = sweep(hand_rows(), 10.0, 100.0, "average", "xent")
        rates = [p.deferral_rate for p in pts]
        assert rates == [0.0, 0.25, 0.5, 0.75, 1.0]
        # quality walks from all-small to all-large one example at a time
        expected_quality = [
            (1.0 + 0.0 + 0.25 + 0.0) / 4,
            (1.0 + 0.0 + 0.25 + 1.0) / 4,
            (1.0 + 0.0 + 0.5 + 1.0) / 4,
            (1.0 + 1.0 + 0.5 + 1.0) / 4,
            (1.0 + 1.0 + 0.5 + 1.0) / 4,
        ]
        np.testing.assert_allclose([p.quality for p in pts], expected_quality,
                                   atol=1e-12)
        np.testing.assert_allclose([p.mean_cost for p in pts],
                                   [10 + r * 100 for r in rates], atol=1e-12)

    def test_a1_a2_decompose_quality(self):
        for p in sweep(hand_rows(), 1.0, 2.0, "average", "xent"):
            np.testing.assert_allclose(p.a1 + p.a2, p.quality, atol=1e-15)

    def test_endpoints_are_pure_models(self):
        rows = hand_rows()
        pts = sweep(rows, 1.0, 2.0, "average", "xent")
        small_mean = np.mean([r.small_quality for r in rows])
        large_mean = np.mean([r.large_quality for r in rows])
        assert pts[0].quality == small_mean
        assert pts[-1].quality == large_mean

    def test_tied_scores_defer_together(self):
        rows = [ScoreRow("a/0", 0.5, True, True, 1.0, 0.0, 1),
                ScoreRow("a/1", 0.5, False, True, 0.0, 1.0, 1)]
        pts = sweep(rows, 1.0, 2.0, "average", "xent")
        assert [p.deferral_rate for p in pts] == [0.0, 1.0]

    def test_empty_rejected(self):
        with pytest.raises(EvalError, match="empty"):
            sweep([], 1.0, 2.0, "average", "xent")


class TestAudc:
    def test_trapezoid_by_hand(self):
        pts = sweep(hand_rows(), 1.0, 2.0, "average", "xent")
        rates = np.array([p.deferral_rate for p in pts])
        quality = np.array([p.quality for p in pts])
        np.testing.assert_allclose(audc(pts), np.trapezoid(quality, rates), atol=1e-15)

    def test_constant_curve_integrates_to_height(self):
        rows = [ScoreRow(f"a/{i}", float(i), True, True, 0.75, 0.75, 1)
                for i in range(5)]
        np.testing.assert_allclose(audc(sweep(rows, 1, 2, "average", "xent")), 0.75,
                                   atol=1e-12)

    def test_incomplete_curve_rejected(self):
        pts = sweep(hand_rows(), 1.0, 2.0, "average", "xent")[1:]
        with pytest.raises(EvalError):
            audc(pts)


class TestValueAtRate:
    def test_exact_point(self):
        pts = sweep(hand_rows(), 1.0, 2.0, "average", "xent")
        np.testing.assert_allclose(quality_at_rate(pts, 0.5), pts[2].quality)

    def test_interpolates_between_points(self):
        pts = sweep(hand_rows(), 1.0, 2.0, "average", "xent")
        mid = 0.5 * (pts[0].quality + pts[1].quality)
        np.testing.assert_allclose(quality_at_rate(pts, 0.125), mid, atol=1e-12)

    def test_other_fields(self):
        pts = sweep(hand_rows(), 10.0, 100.0, "average", "xent")
        np.testing.assert_allclose(value_at_rate(pts, 0.25, "mean_cost"), 35.0)
        np.testing.assert_allclose(value_at_rate(pts, 0.25, "a2"), pts[1].a2)

    def test_out_of_range_rejected(self):
        pts = sweep(hand_rows(), 1.0, 2.0, "average", "xent")
        with pytest.raises(EvalError):
            value_at_rate(pts, 1.5)


class TestCurveCsv:
    def test_header_and_roundtrip(self, tmp_path):
        pts = sweep(hand_rows(), 1.0, 2.0, "quantile_0.40", "cat_xent")
        path = tmp_path / "curve.csv"
        write_curve_csv(pts, path)
        text = path.read_text()
        assert text.splitlines()[0] == ",".join(CURVE_COLUMNS)
        assert read_curve_csv(path) == pts

    def test_text_is_deterministic(self):
        pts = sweep(hand_rows(), 1.0, 2.0, "average", "xent")
        assert curve_csv_text(pts) == curve_csv_text(pts)

    def test_floats_survive_roundtrip_exactly(self, tmp_path):
        rows = [ScoreRow(f"a/{i}", float(i) / 7.0, True, False, 1.0 / 3.0, 0.9, 1)
                for i in range(4)]
        pts = sweep(rows, 1.0 / 3.0, 2.0 / 3.0, "average", "xent")
        path = tmp_path / "curve.csv"
        write_curve_csv(pts, path)
        for before, after in zip(pts, read_curve_csv(path)):
            assert before.tau == after.tau
            assert before.quality == after.quality
            assert before.mean_cost == after.mean_cost

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "curve.csv"
        path.write_text("x,y\n1,2\n")
        with pytest.raises(EvalError, match="curve"):
            read_curve_csv(path)


class TestSvg:
    def test_deterministic_and_wellformed(self, tmp_path):
        series = [("xent", [0.0, 0.5, 1.0], [0.2, 0.5, 0.6]),
                  ("cat_xent", [0.0, 0.5, 1.0], [0.3, 0.55, 0.6])]
        pa, pb = tmp_path / "a.svg", tmp_path / "b.svg"
        render_curves_svg(series, pa, "curves", "deferral rate", "quality")
        render_curves_svg(series, pb, "curves", "deferral rate", "quality")
        a = pa.read_text()
        assert a == pb.read_text()
        assert a.startswith("<svg")
        assert a.rstrip().endswith("</svg>")
        assert a.count("<polyline") == 2
        assert "cat_xent" in a

    def test_empty_series_rejected(self, tmp_path):
        with pytest.raises(EvalError):
            render_curves_svg([], tmp_path / "e.svg", "t", "x", "y")
