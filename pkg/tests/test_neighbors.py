import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import knn_oracle
from ptsne.core import DataSet
from ptsne.errors import KTooLarge
from ptsne.neighbors import exact_knn, knn_from_d2


class TestBruteForce:
    def test_matches_oracle(self, rng):
        x = rng.normal(size=(80, 6))
        ds = DataSet(x)
        ids, d2 = exact_knn(ds, 7, engine="brute")
        want_ids, want_d2 = knn_oracle(ds.sq_distance_matrix(), 7)
        assert np.array_equal(ids, want_ids)
        assert np.array_equal(d2, want_d2)

    def test_tie_break_by_index(self):
        # four points, two of them equidistant from the query point: the
        # smaller index must win the nearer slot
        x = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [5.0, 5.0]])
        ids, d2 = exact_knn(DataSet(x), 2, engine="brute")
        assert ids[0].tolist() == [1, 2]
        assert d2[0].tolist() == [1.0, 1.0]

    def test_forced_tie_lattice(self, rng):
        # integer lattice coordinates create many exactly equal distances
        x = rng.integers(0, 4, size=(120, 3)).astype(float)
        ds = DataSet(x)
        ids, d2 = exact_knn(ds, 10, engine="brute")
        want_ids, want_d2 = knn_oracle(ds.sq_distance_matrix(), 10)
        assert np.array_equal(ids, want_ids)
        assert np.array_equal(d2, want_d2)

    def test_never_returns_self(self, rng):
        x = rng.normal(size=(50, 2))
        ids, _ = exact_knn(DataSet(x), 49, engine="brute")
        for i in range(50):
            assert i not in ids[i]
            assert len(set(ids[i].tolist())) == 49

    def test_distances_sorted(self, rng):
        x = rng.normal(size=(64, 4))
        _, d2 = exact_knn(DataSet(x), 20, engine="brute")
        assert np.all(np.diff(d2, axis=1) >= 0)


class TestVpTree:
    def test_bitwise_identical_to_brute(self, rng):
        x = rng.normal(size=(700, 3))
        ds = DataSet(x)
        for k in (1, 5, 33):
            bi, bd = exact_knn(ds, k, engine="brute")
            vi, vd = exact_knn(ds, k, engine="vptree")
            assert np.array_equal(bi, vi), f"ids diverge at k={k}"
            assert np.array_equal(bd, vd), f"d2 diverge at k={k}"

    def test_bitwise_identical_with_ties(self, rng):
        # rounding to one decimal forces duplicate coordinates and exact
        # distance ties, the hard case for tree traversal order
        x = np.round(rng.normal(size=(600, 2)), 1)
        ds = DataSet(x)
        bi, bd = exact_knn(ds, 12, engine="brute")
        vi, vd = exact_knn(ds, 12, engine="vptree")
        assert np.array_equal(bi, vi)
        assert np.array_equal(bd, vd)

    def test_duplicate_points(self):
        x = np.repeat(np.arange(6, dtype=float)[:, None], 4, axis=1)
        x = np.vstack([x, x, x])  # every point appears three times
        ds = DataSet(x)
        bi, bd = exact_knn(ds, 5, engine="brute")
        vi, vd = exact_knn(ds, 5, engine="vptree")
        assert np.array_equal(bi, vi)
        assert np.array_equal(bd, vd)


class TestPrecomputed:
    def test_matches_brute(self, rng):
        x = rng.normal(size=(90, 5))
        ds = DataSet(x)
        bi, bd = exact_knn(ds, 8, engine="brute")
        pi, pd = knn_from_d2(ds.sq_distance_matrix(), 8)
        assert np.array_equal(bi, pi)
        assert np.array_equal(bd, pd)

    def test_k_bounds(self, rng):
        d2 = DataSet(rng.normal(size=(10, 2))).sq_distance_matrix()
        with pytest.raises(KTooLarge):
            knn_from_d2(d2, 0)
        with pytest.raises(KTooLarge):
            knn_from_d2(d2, 10)


class TestRoutingAndValidation:
    def test_k_too_large(self, rng):
        ds = DataSet(rng.normal(size=(20, 2)))
        with pytest.raises(KTooLarge):
            exact_knn(ds, 20)
        with pytest.raises(KTooLarge):
            exact_knn(ds, 0)

    def test_auto_equals_brute(self, rng):
        # whatever engine auto picks, results must be the brute-force ones
        x = rng.normal(size=(1500, 3))
        ds = DataSet(x)
        ai, ad = exact_knn(ds, 15, engine="auto")
        bi, bd = exact_knn(ds, 15, engine="brute")
        assert np.array_equal(ai, bi)
        assert np.array_equal(ad, bd)

    def test_unknown_engine(self, rng):
        ds = DataSet(rng.normal(size=(10, 2)))
        with pytest.raises(ValueError):
            exact_knn(ds, 3, engine="quadtree")


class TestProperties:
    @settings(max_examples=25, deadline=None)
    @given(
        st.integers(5, 40),
        st.integers(1, 4),
        st.integers(0, 2**32 - 1),
        st.booleans(),
    )
    def test_neighbor_invariants(self, n, m, seed, quantize):
        gen = np.random.default_rng(seed)
        x = gen.normal(size=(n, m))
        if quantize:
            x = np.round(x, 0)
        k = min(4, n - 1)
        ds = DataSet(x)
        ids, d2 = exact_knn(ds, k, engine="brute")
        want_ids, want_d2 = knn_oracle(ds.sq_distance_matrix(), k)
        assert np.array_equal(ids, want_ids)
        assert np.array_equal(d2, want_d2)
