import math

import numpy as np
import pytest

from cicd.errors import DimensionError, DuplicateId, InsufficientPool, ParseError, ZeroNormError
from cicd.selector import (
    build_store,
    load_store,
    save_store,
    select_random,
    select_retrieved,
)


def brute_force_retrieve(store, query_id, query_vec):
    """Linear-scan reference with the same tie rule, written independently."""
    query_vec = np.asarray(query_vec, dtype=float)
    best = None
    for image_id in store.ids:
        if image_id == query_id:
            continue
        v = store.vector(image_id)
        sim = float(v @ query_vec) / (math.sqrt(float(v @ v)) * math.sqrt(float(query_vec @ query_vec)))
        key = (sim, image_id)
        if best is None or key < best:
            best = key
    return best[1], best[0]


class TestBuildStore:
    def test_basic_construction(self):
        store = build_store([("a", [1.0, 0.0]), ("b", [0.0, 1.0]), ("c", [1.0, 1.0])])
        assert len(store) == 3 and store.dim == 2

    def test_duplicate_id(self):
        with pytest.raises(DuplicateId):
            build_store([("a", [1.0]), ("a", [2.0])])

    def test_empty_input(self):
        with pytest.raises(DimensionError):
            build_store([])

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            build_store([("a", [1.0, 2.0]), ("b", [1.0])])


class TestSelectRetrieved:
    def test_antipodal_argmin(self):
        store = build_store([("a", [1.0, 0.0]), ("b", [0.0, 1.0]), ("c", [-1.0, 0.0])])
        out = select_retrieved(store, "a", [1.0, 0.0])
        assert out.chosen_id == "c"
        assert out.similarity == pytest.approx(-1.0, abs=1e-15)
        assert out.mode == "retrieved"

    def test_forced_choice(self):
        store = build_store([("a", [1.0, 0.0]), ("b", [1.0, 0.0])])
        out = select_retrieved(store, "a", [1.0, 0.0])
        assert out.chosen_id == "b"

    def test_tie_breaks_lexicographically(self):
        store = build_store([("q", [1.0, 0.0]), ("z", [0.0, 1.0]), ("b", [0.0, -1.0])])
        out = select_retrieved(store, "q", [1.0, 0.0])
        assert out.chosen_id == "b"
        assert out.similarity == pytest.approx(0.0, abs=1e-15)

    def test_scale_invariance(self):
        records = [("a", [1.0, 2.0]), ("b", [-3.0, 1.0]), ("c", [0.5, -2.0])]
        base = select_retrieved(build_store(records), "a", [1.0, 2.0])
        scaled = [(i, list(np.array(v) * s)) for (i, v), s in zip(records, [1.0, 17.5, 0.003])]
        out = select_retrieved(build_store(scaled), "a", [1.0, 2.0])
        assert out.chosen_id == base.chosen_id

    def test_zero_norm_query(self):
        store = build_store([("a", [1.0]), ("b", [2.0])])
        with pytest.raises(ZeroNormError):
            select_retrieved(store, "a", [0.0])

    def test_zero_norm_stored(self):
        store = build_store([("a", [1.0]), ("b", [0.0])])
        with pytest.raises(ZeroNormError):
            select_retrieved(store, "a", [1.0])

    def test_matches_brute_force_on_1000_random_stores(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            n = int(rng.integers(2, 21))
            dim = int(rng.integers(1, 6))
            vectors = rng.normal(0, 1, (n, dim))
            # occasional duplicate rows to force ties
            if n > 2 and rng.random() < 0.3:
                vectors[1] = vectors[n - 1]
            ids = [f"img{int(k):03d}" for k in rng.permutation(n)]
            store = build_store(list(zip(ids, vectors)))
            query = ids[int(rng.integers(n))]
            qvec = store.vector(query)
            got = select_retrieved(store, query, qvec)
            want_id, want_sim = brute_force_retrieve(store, query, qvec)
            assert got.chosen_id == want_id
            assert got.similarity == pytest.approx(want_sim, abs=1e-12)
            assert got.chosen_id != query


class TestSelectRandom:
    def test_size_two_is_forced(self):
        store = build_store([("a", [1.0]), ("b", [2.0])])
        out = select_random(store, "a", np.random.default_rng(0))
        assert out.chosen_id == "b" and out.mode == "random"

    def test_deterministic_given_seed(self):
        store = build_store([(f"i{k}", [float(k)]) for k in range(10)])
        picks = {select_random(store, "i3", np.random.default_rng(99)).chosen_id for _ in range(5)}
        assert len(picks) == 1

    def test_never_returns_query(self):
        store = build_store([(f"i{k}", [float(k)]) for k in range(5)])
        rng = np.random.default_rng(1)
        assert all(select_random(store, "i2", rng).chosen_id != "i2" for _ in range(200))

    def test_uniformity_within_3_sigma(self):
        store = build_store([(f"i{k}", [float(k)]) for k in range(6)])
        rng = np.random.default_rng(123)
        counts = {f"i{k}": 0 for k in range(6) if k != 0}
        n = 10_000
        for _ in range(n):
            counts[select_random(store, "i0", rng).chosen_id] += 1
        p = 1.0 / 5.0
        sigma = math.sqrt(n * p * (1 - p))
        for c in counts.values():
            assert abs(c - n * p) <= 3 * sigma

    def test_insufficient_pool(self):
        store = build_store([("only", [1.0])])
        with pytest.raises(InsufficientPool):
            select_random(store, "only", np.random.default_rng(0))


class TestStoreFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        store = build_store([(f"im{k}", rng.normal(0, 1, 7)) for k in range(9)])
        path = tmp_path / "store.emb"
        save_store(store, path)
        loaded = load_store(path)
        assert loaded.ids == store.ids
        np.testing.assert_array_equal(loaded.vectors, store.vectors)

    def test_header_validation(self, tmp_path):
        path = tmp_path / "bad.emb"
        path.write_text("NOT-EMB v1 2 1\nx 1 2\n")
        with pytest.raises(ParseError):
            load_store(path)

    def test_version_check(self, tmp_path):
        path = tmp_path / "bad.emb"
        path.write_text("CICD-EMB v9 2 1\nx 1 2\n")
        with pytest.raises(ParseError):
            load_store(path)

    def test_count_mismatch(self, tmp_path):
        path = tmp_path / "bad.emb"
        path.write_text("CICD-EMB v1 2 3\nx 1 2\ny 3 4\n")
        with pytest.raises(ParseError):
            load_store(path)

    def test_dim_mismatch(self, tmp_path):
        path = tmp_path / "bad.emb"
        path.write_text("CICD-EMB v1 2 1\nx 1 2 3\n")
        with pytest.raises(ParseError):
            load_store(path)
