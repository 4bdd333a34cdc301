import numpy as np
import pytest

from ptsne.core import DataSet, sq_distances
from ptsne.errors import ConfigError, KTooLarge, NotNormalized, SupportViolation
from ptsne.quality import (
    KnpCurve,
    auc,
    default_k_grid,
    exact_kl,
    joint_from_conditionals,
    kl_decomposition,
    knp_curve,
    lowdim_joint,
    rank_matrix,
)


class TestRankMatrix:
    def test_against_explicit_sort(self, rng):
        x = rng.normal(size=(40, 3))
        d2 = sq_distances(x, x)
        ranks = rank_matrix(d2)
        for i in range(40):
            cand = sorted((d2[i, j], j) for j in range(40) if j != i)
            for pos, (_, j) in enumerate(cand):
                assert ranks[i, j] == pos
            assert ranks[i, i] == 39  # self is the out-of-range sentinel

    def test_rows_are_permutations(self, rng):
        d2 = sq_distances(*([rng.normal(size=(25, 2))] * 2))
        ranks = rank_matrix(d2)
        for i in range(25):
            assert np.array_equal(np.sort(ranks[i]), np.arange(25))

    def test_tie_break_by_index(self):
        # points 1 and 2 equidistant from 0: index order decides
        y = np.array([[0.0], [1.0], [-1.0], [9.0]])
        ranks = rank_matrix(sq_distances(y, y))
        assert ranks[0, 1] == 0
        assert ranks[0, 2] == 1

    def test_non_square_rejected(self):
        with pytest.raises(ConfigError):
            rank_matrix(np.zeros((3, 4)))


class TestKnpCurve:
    def test_isometry_preserves_everything(self, rng):
        y = rng.normal(size=(150, 2))
        # quarter turn plus a translation: distances survive bitwise
        moved = np.column_stack([-y[:, 1], y[:, 0]]) + 0.5
        curve = knp_curve(sq_distances(y, y), moved)
        assert np.all(curve.preservation == 1.0)

    def test_full_neighborhood_is_always_shared(self, rng):
        y_hd = rng.normal(size=(60, 5))
        y_ld = rng.normal(size=(60, 2))
        curve = knp_curve(
            sq_distances(y_hd, y_hd), y_ld, ks=np.array([59])
        )
        assert curve.preservation[0] == 1.0

    def test_random_embedding_matches_hypergeometric(self, rng):
        # unrelated HD and LD data: the shared-neighbor count at k is
        # hypergeometric with mean k^2/(n-1)
        n = 400
        hd = rng.normal(size=(n, 6))
        ld = rng.normal(size=(n, 2))
        ks = np.array([5, 20, 100])
        curve = knp_curve(sq_distances(hd, hd), ld, ks=ks)
        big_n = n - 1
        for k, pres in zip(ks, curve.preservation):
            mean = k / big_n
            frac = k / big_n
            var_one = (k * frac * (1 - frac) * (big_n - k) / (big_n - 1)) / k**2
            se_mean = np.sqrt(var_one / n)
            assert abs(pres - mean) < 4 * se_mean, f"k={k}"

    def test_precomputed_ranks_identical(self, gauss400, rng):
        y = rng.normal(size=(400, 2))
        d2 = gauss400.sq_distance_matrix()
        a = knp_curve(d2, y)
        b = knp_curve(None, y, hd_ranks=rank_matrix(d2))
        assert np.array_equal(a.ks, b.ks)
        assert np.array_equal(a.preservation, b.preservation)

    def test_dataset_input(self, gauss400):
        # structure-preserving map of the leaf id: high preservation
        # is not required here, just the DataSet entry point
        y = gauss400.row_block(0, 400)[:, :2]
        curve = knp_curve(gauss400, y, ks=np.array([10]))
        assert 0.0 <= curve.preservation[0] <= 1.0

    def test_validation(self, rng):
        y = rng.normal(size=(30, 2))
        d2 = sq_distances(y, y)
        with pytest.raises(KTooLarge):
            knp_curve(d2, y, ks=np.array([30]))
        with pytest.raises(KTooLarge):
            knp_curve(d2, y, ks=np.array([0]))
        with pytest.raises(KTooLarge):
            knp_curve(d2, y, ks=np.array([], dtype=np.int64))
        with pytest.raises(ConfigError):
            knp_curve(d2, y, ks=np.array([5, 5, 9]))
        with pytest.raises(ConfigError):
            knp_curve(np.zeros((10, 10)), y)

    def test_default_grid(self):
        ks = default_k_grid(3282)
        assert ks[0] == 1 and ks[-1] == 3281
        assert np.all(np.diff(ks) > 0)
        assert len(ks) <= 50
        small = default_k_grid(6)
        assert small.tolist() == [1, 2, 3, 4, 5]


class TestAuc:
    def test_constant_curve(self):
        curve = KnpCurve(
            ks=np.array([1, 10, 100]), preservation=np.full(3, 0.37)
        )
        np.testing.assert_allclose(auc(curve, "linear"), 0.37, rtol=1e-15)
        np.testing.assert_allclose(auc(curve, "log"), 0.37, rtol=1e-15)

    def test_hand_trapezoid(self):
        curve = KnpCurve(
            ks=np.array([1, 2, 4]), preservation=np.array([1.0, 1.0, 0.0])
        )
        np.testing.assert_allclose(auc(curve, "linear"), 2.0 / 3.0, rtol=1e-12)
        np.testing.assert_allclose(auc(curve, "log"), 0.75, rtol=1e-12)

    def test_single_point(self):
        curve = KnpCurve(ks=np.array([7]), preservation=np.array([0.5]))
        assert auc(curve, "linear") == 0.5
        assert auc(curve, "log") == 0.5

    def test_unknown_scale(self):
        curve = KnpCurve(ks=np.array([1, 2]), preservation=np.array([1.0, 1.0]))
        with pytest.raises(ConfigError):
            auc(curve, "sqrt")


class TestExactKl:
    def test_zero_on_equal(self, rng):
        p = rng.random(20)
        p /= p.sum()
        assert exact_kl(p, p.copy()) == 0.0

    def test_point_mass_against_uniform(self):
        got = exact_kl(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
        np.testing.assert_allclose(got, np.log(2.0), rtol=1e-15)

    def test_hand_example(self):
        p = np.array([0.75, 0.25])
        q = np.array([0.5, 0.5])
        want = 0.75 * np.log(1.5) + 0.25 * np.log(0.5)
        np.testing.assert_allclose(exact_kl(p, q), want, rtol=1e-14)

    def test_support_violation(self):
        with pytest.raises(SupportViolation):
            exact_kl(np.array([0.5, 0.5]), np.array([1.0, 0.0]))

    def test_not_normalized(self):
        with pytest.raises(NotNormalized):
            exact_kl(np.array([0.5, 0.4]), np.array([0.5, 0.5]))
        with pytest.raises(NotNormalized):
            exact_kl(np.array([0.5, 0.5]), np.array([1.5, -0.5]))

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            exact_kl(np.array([1.0]), np.array([0.5, 0.5]))


def _random_conditionals(rng, n):
    cond = rng.random((n, n))
    np.fill_diagonal(cond, 0.0)
    cond /= cond.sum(axis=1, keepdims=True)
    return cond


class TestKlDecomposition:
    def test_joint_from_conditionals(self, rng):
        cond = _random_conditionals(rng, 12)
        p = joint_from_conditionals(cond)
        np.testing.assert_allclose(p.sum(), 1.0, rtol=1e-12)
        assert np.array_equal(p, p.T)
        assert np.all(np.diag(p) == 0)
        with pytest.raises(NotNormalized):
            joint_from_conditionals(cond * 2)
        bad = cond.copy()
        bad[0, 0] = 0.1
        with pytest.raises(ConfigError):
            joint_from_conditionals(bad)

    def test_lowdim_joint(self, rng):
        q = lowdim_joint(rng.normal(size=(15, 2)))
        np.testing.assert_allclose(q.sum(), 1.0, rtol=1e-12)
        assert np.all(np.diag(q) == 0)
        np.testing.assert_allclose(q, q.T, rtol=1e-14)

    def test_chain_rule_identity(self, rng):
        # the three fields are computed along independent routes, so
        # recall + prevalence = total is a real consistency check
        for n in (10, 50):
            cond = _random_conditionals(rng, n)
            y = rng.normal(size=(n, 2))
            dec = kl_decomposition(cond, y)
            assert dec.total_kl > 0
            assert dec.expected_smoothed_recall >= 0
            gap = abs(
                dec.expected_smoothed_recall
                + dec.prevalence_divergence
                - dec.total_kl
            )
            assert gap <= 1e-10

    def test_exact_match_is_all_zero(self):
        # three points: uniform conditionals and an equilateral triangle
        # give identical joints, so every term vanishes
        cond = np.array(
            [[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]]
        )
        y = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3.0) / 2.0]])
        dec = kl_decomposition(cond, y)
        assert abs(dec.total_kl) < 1e-14
        assert abs(dec.expected_smoothed_recall) < 1e-14
        assert abs(dec.prevalence_divergence) < 1e-14

    def test_prevalence_marginal_formula(self, rng):
        # p_i = 1/(2n) + (1/(2n)) sum_k cond[k, i]: outgoing mass is the
        # constant half, incoming mass carries the structure
        n = 20
        cond = _random_conditionals(rng, n)
        p_i = joint_from_conditionals(cond).sum(axis=1)
        want = 1.0 / (2 * n) + cond.sum(axis=0) / (2 * n)
        np.testing.assert_allclose(p_i, want, rtol=1e-12)

    def test_size_mismatch(self, rng):
        cond = _random_conditionals(rng, 8)
        with pytest.raises(ConfigError):
            kl_decomposition(cond, rng.normal(size=(9, 2)))
