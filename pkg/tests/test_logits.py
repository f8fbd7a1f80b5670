import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cicd.errors import DimensionError, EmptySupport, ZeroNormError
from cicd.logits import (
    LN2,
    Distribution,
    DivergenceValue,
    LogitVector,
    adaptive_plausibility_mask,
    distance_suite,
    js_divergence,
    kl_divergence,
    softmax,
)

from oracles import oracle_jsd, oracle_kl, oracle_softmax


def random_distribution(rng, size):
    raw = rng.random(size) + 1e-12
    return Distribution(raw / raw.sum())


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(LogitVector(np.array([0.0, 0.0])))
        np.testing.assert_allclose(out.probs, [0.5, 0.5], rtol=0, atol=0)

    def test_shift_invariance(self):
        a = softmax(LogitVector(np.array([1.0, 2.0])))
        b = softmax(LogitVector(np.array([101.0, 102.0])))
        np.testing.assert_allclose(a.probs, b.probs, atol=1e-12)

    def test_quarter_three_quarter(self):
        # softmax([0, ln 3]) = [1/4, 3/4]; cross-checked at extended precision
        logits = np.array([0.0, math.log(3.0)])
        expect = oracle_softmax(logits)
        np.testing.assert_allclose(expect, [0.25, 0.75], atol=1e-15)
        out = softmax(LogitVector(logits))
        np.testing.assert_allclose(out.probs, [0.25, 0.75], atol=1e-12)

    def test_masked_entries_get_zero(self):
        out = softmax(LogitVector(np.array([0.0, 5.0, 0.0]), mask=np.array([False, True, False])))
        np.testing.assert_allclose(out.probs, [0.5, 0.0, 0.5], atol=1e-12)

    def test_all_masked_raises(self):
        vec = LogitVector(np.array([0.0, 1.0]), mask=np.array([True, True]))
        with pytest.raises(EmptySupport):
            softmax(vec)

    def test_nonfinite_unmasked_rejected(self):
        with pytest.raises(ValueError):
            LogitVector(np.array([0.0, np.inf]))
        # masked entries may be non-finite placeholders
        LogitVector(np.array([0.0, np.nan]), mask=np.array([False, True]))

    @given(st.integers(2, 200), st.integers(0, 2**32 - 1),
           st.floats(-50, 50, allow_nan=False))
    @settings(max_examples=60, deadline=None)
    def test_sum_and_shift_properties(self, size, seed, shift):
        rng = np.random.default_rng(seed)
        values = rng.normal(0, 5, size)
        out = softmax(LogitVector(values))
        assert abs(out.probs.sum() - 1.0) <= 1e-9
        shifted = softmax(LogitVector(values + shift))
        np.testing.assert_allclose(out.probs, shifted.probs, atol=1e-12)


class TestKlDivergence:
    def test_identity(self):
        p = Distribution(np.array([0.3, 0.7]))
        assert kl_divergence(p, p) == 0.0

    def test_disjoint_support_infinite(self):
        p = Distribution(np.array([1.0, 0.0]))
        q = Distribution(np.array([0.0, 1.0]))
        assert kl_divergence(p, q) == math.inf

    def test_half_vs_quarter(self):
        p = Distribution(np.array([0.5, 0.5]))
        q = Distribution(np.array([0.25, 0.75]))
        got = kl_divergence(p, q)
        assert got == pytest.approx(0.5 * math.log(4.0 / 3.0), abs=1e-15)
        assert got == pytest.approx(oracle_kl(p.probs, q.probs), abs=1e-14)

    def test_size_mismatch(self):
        with pytest.raises(DimensionError):
            kl_divergence(Distribution(np.array([1.0])), Distribution(np.array([0.5, 0.5])))


class TestJsDivergence:
    def test_identity_is_zero(self):
        rng = np.random.default_rng(0)
        for size in (2, 17, 301):
            p = random_distribution(rng, size)
            assert js_divergence(p, p).jsd <= 1e-15

    def test_disjoint_support_is_ln2(self):
        p = Distribution(np.array([1.0, 0.0]))
        q = Distribution(np.array([0.0, 1.0]))
        d = js_divergence(p, q)
        assert d.jsd == pytest.approx(LN2, abs=1e-12)

    def test_example_matches_oracle(self):
        p = Distribution(np.array([0.5, 0.5]))
        q = Distribution(np.array([0.25, 0.75]))
        assert js_divergence(p, q).jsd == pytest.approx(oracle_jsd(p.probs, q.probs), abs=1e-12)

    def test_oracle_agreement_100_random_pairs(self):
        rng = np.random.default_rng(20260811)
        for _ in range(100):
            size = int(rng.integers(10, 1001))
            p = random_distribution(rng, size)
            q = random_distribution(rng, size)
            got = js_divergence(p, q).jsd
            assert got == pytest.approx(oracle_jsd(p.probs, q.probs), abs=1e-12)

    def test_bounds_symmetry_identity_1000_pairs(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            size = int(rng.integers(10, 1001))
            p = random_distribution(rng, size)
            q = random_distribution(rng, size)
            forward = js_divergence(p, q).jsd
            backward = js_divergence(q, p).jsd
            assert 0.0 <= forward <= LN2
            assert abs(forward - backward) <= 1e-12
            assert js_divergence(p, p).jsd <= 1e-15

    def test_sparse_support_zeros_in_both(self):
        p = Distribution(np.array([0.5, 0.5, 0.0, 0.0]))
        q = Distribution(np.array([0.0, 0.5, 0.5, 0.0]))
        got = js_divergence(p, q)
        assert got.jsd == pytest.approx(oracle_jsd(p.probs, q.probs), abs=1e-12)
        assert math.isfinite(got.jsd)

    def test_log10_field(self):
        d = js_divergence(Distribution(np.array([1.0, 0.0])), Distribution(np.array([0.0, 1.0])))
        assert d.log10_jsd == pytest.approx(math.log10(d.jsd), abs=0)
        zero = js_divergence(Distribution(np.array([0.5, 0.5])), Distribution(np.array([0.5, 0.5])))
        assert zero.jsd == 0.0 and zero.log10_jsd == -math.inf

    def test_size_mismatch(self):
        with pytest.raises(DimensionError):
            js_divergence(Distribution(np.array([1.0])), Distribution(np.array([0.5, 0.5])))


class TestDivergenceValue:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            DivergenceValue(jsd=-0.1)
        with pytest.raises(ValueError):
            DivergenceValue(jsd=1.0)

    def test_log10_computed(self):
        d = DivergenceValue(jsd=1e-4)
        assert d.log10_jsd == -4.0


class TestDistanceSuite:
    def test_identity(self):
        a = LogitVector(np.array([1.0, 2.0, 3.0]))
        out = distance_suite(a, LogitVector(np.array([1.0, 2.0, 3.0])))
        assert out["cosine_distance"] == 0.0
        assert out["euclidean_distance"] == 0.0
        assert out["total_variation"] == 0.0

    def test_antipodal_cosine(self):
        out = distance_suite(LogitVector(np.array([1.0, 0.0])), LogitVector(np.array([-1.0, 0.0])))
        assert out["cosine_distance"] == pytest.approx(2.0, abs=1e-12)

    def test_orthogonal_euclidean(self):
        out = distance_suite(LogitVector(np.array([1.0, 0.0])), LogitVector(np.array([0.0, 1.0])))
        assert out["euclidean_distance"] == pytest.approx(math.sqrt(2.0), abs=1e-12)

    def test_zero_norm_raises(self):
        with pytest.raises(ZeroNormError):
            distance_suite(LogitVector(np.array([0.0, 0.0])), LogitVector(np.array([1.0, 0.0])))

    @given(st.integers(2, 64), st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_total_variation_bounds(self, size, seed):
        rng = np.random.default_rng(seed)
        a = LogitVector(rng.normal(0, 3, size) + 0.1)
        b = LogitVector(rng.normal(0, 3, size) + 0.1)
        tv = distance_suite(a, b)["total_variation"]
        assert 0.0 <= tv <= 1.0
        pa, pb = softmax(a).probs, softmax(b).probs
        assert tv == pytest.approx(0.5 * np.abs(pa - pb).sum(), abs=1e-12)


class TestAdaptivePlausibilityMask:
    def test_loose_cutoff_keeps_all(self):
        kept = adaptive_plausibility_mask(Distribution(np.array([0.7, 0.2, 0.1])), 0.1)
        assert kept.tolist() == [0, 1, 2]

    def test_tight_cutoff_keeps_argmax(self):
        kept = adaptive_plausibility_mask(Distribution(np.array([0.7, 0.2, 0.1])), 0.5)
        assert kept.tolist() == [0]

    def test_uniform_keeps_all(self):
        kept = adaptive_plausibility_mask(Distribution(np.full(8, 0.125)), 0.9)
        assert kept.tolist() == list(range(8))

    def test_exact_cutoff_is_kept(self):
        # the rule is inclusive: p_i equal to beta * max(p) stays in
        # (0.1 * 0.5 and 0.05 are the same double, so equality is exact)
        kept = adaptive_plausibility_mask(
            Distribution(np.array([0.5, 0.25, 0.2, 0.05])), 0.1)
        assert kept.tolist() == [0, 1, 2, 3]

    def test_beta_out_of_range(self):
        with pytest.raises(ValueError):
            adaptive_plausibility_mask(Distribution(np.array([1.0])), 1.0)

    @given(st.integers(2, 100), st.integers(0, 2**32 - 1),
           st.floats(0.001, 0.999, allow_nan=False))
    @settings(max_examples=60, deadline=None)
    def test_always_contains_argmax(self, size, seed, beta):
        rng = np.random.default_rng(seed)
        p = random_distribution(rng, size)
        kept = adaptive_plausibility_mask(p, beta)
        assert int(np.argmax(p.probs)) in kept
        assert np.all(p.probs[kept] >= beta * p.probs.max())
