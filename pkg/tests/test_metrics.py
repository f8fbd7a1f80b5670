import math

import numpy as np
import pytest

from cicd.metrics import (
    CaptionRecord,
    ConfusionCounts,
    amber_composite,
    capture_score,
    chair_scores,
    jsd_stats,
    overlap_ratio,
    pope_scores,
)


def recount_chair(records):
    """Brute-force recount written independently of the implementation."""
    halluc_caps = 0
    all_mentions = []
    recalls = []
    for rec in records:
        flags = [m not in rec.truth for m in rec.mentions]
        if any(flags):
            halluc_caps += 1
        all_mentions.extend(flags)
        if rec.truth:
            recalls.append(sum(1 for t in rec.truth if t in rec.mentions) / len(rec.truth))
    chair_s = halluc_caps / len(records)
    chair_i = (sum(all_mentions) / len(all_mentions)) if all_mentions else 0.0
    recall = sum(recalls) / len(recalls) if recalls else 0.0
    return chair_s, chair_i, recall


class TestChairScores:
    def test_single_caption_with_one_hallucination(self):
        rec = CaptionRecord.make("i", ["dog", "cat", "car"], ["dog", "cat"])
        out = chair_scores([rec])
        assert out.chair_i == pytest.approx(1 / 3)
        assert out.chair_s == 1.0
        assert out.recall == 1.0

    def test_half_the_captions_hallucinate(self):
        clean = CaptionRecord.make("a", ["dog"], ["dog", "cat"])
        dirty = CaptionRecord.make("b", ["car"], ["dog"])
        out = chair_scores([clean, dirty])
        assert out.chair_s == 0.5

    def test_all_mentions_grounded(self):
        rec = CaptionRecord.make("i", ["dog", "cat"], ["dog", "cat", "bird"])
        out = chair_scores([rec])
        assert out.chair_s == 0.0 and out.chair_i == 0.0
        assert out.recall == pytest.approx(2 / 3)

    def test_zero_mentions_flagged(self):
        out = chair_scores([CaptionRecord.make("i", [], ["dog"])])
        assert out.chair_i == 0.0 and out.no_mentions

    def test_repeated_mentions_count_each_time(self):
        rec = CaptionRecord.make("i", ["car", "car", "dog"], ["dog"])
        out = chair_scores([rec])
        assert out.chair_i == pytest.approx(2 / 3)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            chair_scores([])

    def test_matches_recount_on_random_fixtures(self):
        rng = np.random.default_rng(17)
        vocab = [f"o{i}" for i in range(12)]
        for _ in range(200):
            records = []
            for k in range(int(rng.integers(1, 11))):
                mentions = [vocab[i] for i in rng.integers(0, 12, size=int(rng.integers(0, 8)))]
                truth = {vocab[i] for i in rng.integers(0, 12, size=int(rng.integers(1, 6)))}
                records.append(CaptionRecord.make(f"img{k}", mentions, truth))
            got = chair_scores(records)
            want_s, want_i, want_r = recount_chair(records)
            assert got.chair_s == pytest.approx(want_s, abs=1e-15)
            assert got.chair_i == pytest.approx(want_i, abs=1e-15)
            assert got.recall == pytest.approx(want_r, abs=1e-15)


class TestPopeScores:
    def test_perfect(self):
        out = pope_scores(ConfusionCounts(tp=50, fp=0, fn=0, tn=50))
        assert (out.accuracy, out.precision, out.recall, out.f1) == (1.0, 1.0, 1.0, 1.0)

    def test_symmetric_half(self):
        out = pope_scores(ConfusionCounts(tp=25, fp=25, fn=25, tn=25))
        assert (out.accuracy, out.precision, out.recall, out.f1) == (0.5, 0.5, 0.5, 0.5)

    def test_degenerate_zero_conventions(self):
        out = pope_scores(ConfusionCounts(tp=0, fp=0, fn=10, tn=90))
        assert out.precision == 0.0 and out.recall == 0.0 and out.f1 == 0.0
        assert out.accuracy == 0.9

    def test_empty_table_rejected(self):
        with pytest.raises(ValueError):
            pope_scores(ConfusionCounts(0, 0, 0, 0))

    def test_matches_recount_on_1000_random_tables(self):
        rng = np.random.default_rng(23)
        for _ in range(1000):
            tp, fp, fn, tn = (int(x) for x in rng.integers(0, 50, size=4))
            if tp + fp + fn + tn == 0:
                tn = 1
            got = pope_scores(ConfusionCounts(tp, fp, fn, tn))
            # naive recount from per-item labels
            labels = ([(1, 1)] * tp + [(0, 1)] * fp + [(1, 0)] * fn + [(0, 0)] * tn)
            correct = sum(1 for truth, pred in labels if truth == pred)
            pred_pos = sum(pred for _t, pred in labels)
            true_pos = sum(1 for truth, pred in labels if truth and pred)
            actual_pos = sum(truth for truth, _p in labels)
            acc = correct / len(labels)
            prec = true_pos / pred_pos if pred_pos else 0.0
            rec = true_pos / actual_pos if actual_pos else 0.0
            f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
            assert got.accuracy == pytest.approx(acc, abs=1e-15)
            assert got.precision == pytest.approx(prec, abs=1e-15)
            assert got.recall == pytest.approx(rec, abs=1e-15)
            assert got.f1 == pytest.approx(f1, abs=1e-15)


class TestComposites:
    def test_amber_reference_values(self):
        assert amber_composite(6.6, 73.1) == 83.25
        assert amber_composite(12.4, 75.0) == 81.30
        assert amber_composite(0.0, 100.0) == 100.0

    def test_amber_range_check(self):
        with pytest.raises(ValueError):
            amber_composite(-1.0, 50.0)
        with pytest.raises(ValueError):
            amber_composite(50.0, 101.0)

    def test_amber_monotone_in_f1(self):
        values = [amber_composite(20.0, f1) for f1 in (0.0, 25.0, 50.0, 75.0, 100.0)]
        assert values == sorted(values)

    def test_capture_reference_values(self):
        assert capture_score(1.0, 1.0, 1.0) == 1.0
        assert capture_score(0.6, 0.5, 0.4) == 0.525
        assert capture_score(0.0, 0.0, 0.0) == 0.0

    def test_capture_weighting(self):
        # objects and attributes carry weight 5, relations only 2
        assert capture_score(1.0, 0.0, 0.0) == capture_score(0.0, 1.0, 0.0)
        assert capture_score(1.0, 0.0, 0.0) > capture_score(0.0, 0.0, 1.0)

    def test_capture_monotone_each_argument(self):
        base = capture_score(0.4, 0.4, 0.4)
        assert capture_score(0.5, 0.4, 0.4) > base
        assert capture_score(0.4, 0.5, 0.4) > base
        assert capture_score(0.4, 0.4, 0.5) > base

    def test_capture_range_check(self):
        with pytest.raises(ValueError):
            capture_score(1.1, 0.0, 0.0)


class TestJsdStats:
    def test_all_zero_goes_to_underflow(self):
        stats = jsd_stats([0.0] * 10, gamma=-4.0)
        assert stats.underflow == 10
        assert stats.fraction_below == 1.0
        assert sum(stats.counts) == 0

    def test_single_value_above_gamma(self):
        stats = jsd_stats([1e-2], gamma=-4.0)
        assert stats.fraction_below == 0.0
        assert sum(stats.counts) == 1

    def test_bucket_counts_sum_to_total(self):
        rng = np.random.default_rng(4)
        values = list(10.0 ** rng.uniform(-14, -0.5, 500)) + [0.0] * 25
        stats = jsd_stats(values, gamma=-4.0)
        assert sum(stats.counts) + stats.underflow + stats.overflow == stats.total == 525

    def test_bin_layout(self):
        stats = jsd_stats([1e-3], gamma=-4.0)
        assert len(stats.counts) == 52
        assert stats.bin_edges[0] == -12.0 and stats.bin_edges[-1] == 1.0
        rows = list(stats.rows())
        assert rows[0][0] == -math.inf  # underflow row first

    def test_boundary_membership(self):
        # log10 that equals gamma counts as below (regular branch)
        stats = jsd_stats([1e-4], gamma=-4.0)
        assert stats.fraction_below == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            jsd_stats([], gamma=-4.0)


class TestOverlapRatio:
    def test_identical(self):
        assert overlap_ratio({"a", "b"}, {"a", "b"}) == 1.0

    def test_disjoint(self):
        assert overlap_ratio({"a"}, {"b"}) == 0.0

    def test_quarter(self):
        assert overlap_ratio({"x", "y", "z", "w"}, {"x"}) == 0.25

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError):
            overlap_ratio(set(), {"a"})


class TestJsdStatsInputs:
    def test_accepts_step_traces(self):
        from cicd.engine import EngineConfig, SessionPair, generate
        from cicd.simworld import SimBackend, WorldConfig, build_world

        world = build_world(WorldConfig(n_images=6, n_objects=10,
                                        n_function_words=8, objects_per_image=3,
                                        caption_len=6, seed=1))
        backend = SimBackend(world)
        pair = SessionPair(backend, backend, "img_000", "img_003")
        result = generate(pair, [], EngineConfig(max_len=8, seed=2))
        from_traces = jsd_stats(result.traces, gamma=-4.0)
        from_values = jsd_stats([t.jsd.jsd for t in result.traces], gamma=-4.0)
        assert from_traces == from_values


class TestCompositeAffineness:
    def test_amber_affine_in_each_argument(self):
        # constant slope: +1 point of F1 adds half a point; +1 point of
        # CHAIR removes half a point
        for chair in (0.0, 20.0, 80.0):
            deltas = {round(amber_composite(chair, f1 + 1.0) - amber_composite(chair, f1), 12)
                      for f1 in (0.0, 40.0, 90.0)}
            assert deltas == {0.5}
        for f1 in (0.0, 40.0, 90.0):
            deltas = {round(amber_composite(chair + 1.0, f1) - amber_composite(chair, f1), 12)
                      for chair in (0.0, 20.0, 80.0)}
            assert deltas == {-0.5}

    def test_capture_affine_in_each_argument(self):
        slopes = (5.0 / 12.0, 5.0 / 12.0, 2.0 / 12.0)
        base = [0.2, 0.3, 0.4]
        for axis, slope in enumerate(slopes):
            bumped = list(base)
            bumped[axis] += 0.1
            delta = capture_score(*bumped) - capture_score(*base)
            assert delta == pytest.approx(0.1 * slope, abs=1e-12)
