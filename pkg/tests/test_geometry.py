import numpy as np
import numpy.testing as npt
import pytest

from patkit.errors import ContractError, FormatError
from patkit.geometry import (
    PointCloud,
    dilated_neighbor_sample,
    dilated_pool,
    fps,
    knn,
    pairwise_sq_dist,
    position_set,
)

TRIANGLE = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
LINE = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [9, 0, 0]])


def naive_sq_dist(p):
    n = len(p)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            d[i, j] = sum((p[i, k] - p[j, k]) ** 2 for k in range(3))
    return d


def naive_fps(p, n_out, start):
    chosen = [start]
    while len(chosen) < n_out:
        best, best_d = None, -1.0
        for i in range(len(p)):
            if i in chosen:
                continue
            d = min(sum((p[i, k] - p[j, k]) ** 2 for k in range(3)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


class TestPointCloud:
    def test_feature_count(self):
        assert PointCloud(np.zeros((5, 6))).f == 3

    @pytest.mark.parametrize("bad", [np.zeros((4, 2)), np.zeros((0, 3)), np.array([[0.0, np.nan, 0]])])
    def test_rejects_invalid(self, bad):
        with pytest.raises(FormatError):
            PointCloud(bad)


class TestDistances:
    def test_unit_triangle(self):
        npt.assert_array_equal(pairwise_sq_dist(TRIANGLE), [[0, 1, 1], [1, 0, 2], [1, 2, 0]])

    def test_single_point(self):
        npt.assert_array_equal(pairwise_sq_dist(np.zeros((1, 3))), [[0]])

    def test_matches_double_loop_exactly(self):
        p = np.random.default_rng(0).normal(size=(20, 3))
        npt.assert_allclose(pairwise_sq_dist(p), naive_sq_dist(p), rtol=0, atol=1e-12)

    def test_ignores_feature_channels(self):
        p = np.random.default_rng(1).normal(size=(10, 5))
        q = p.copy()
        q[:, 3:] = 100
        npt.assert_array_equal(pairwise_sq_dist(p), pairwise_sq_dist(q))


class TestKnn:
    def test_triangle_tie_breaks_by_index(self):
        assert knn(TRIANGLE, 1).indices[0, 0] == 1

    def test_line_nearest_first(self):
        npt.assert_array_equal(knn(LINE, 2).indices[3], [2, 1])

    def test_against_full_sort(self):
        p = np.random.default_rng(2).normal(size=(30, 3))
        d = naive_sq_dist(p)
        got = knn(p, 5).indices
        for i in range(30):
            order = sorted((d[i, j], j) for j in range(30) if j != i)
            assert got[i].tolist() == [j for _, j in order[:5]]

    def test_k_too_large(self):
        with pytest.raises(ContractError):
            knn(TRIANGLE, 3)

    def test_batched_matches_single(self):
        p = np.random.default_rng(3).normal(size=(2, 12, 3))
        b = knn(p, 4).indices
        for i in range(2):
            npt.assert_array_equal(b[i], knn(p[i], 4).indices)


class TestDilated:
    def test_full_scale_pool_size(self):
        assert dilated_pool(1024, 32, 2, 1024) == 64

    def test_desk_pool_clamps_to_k(self):
        assert dilated_pool(256, 32, 2, 1024) == 32

    def test_pool_capped_by_n(self):
        assert dilated_pool(40, 32, 2, 40) == 39

    def test_pool_equal_k_matches_knn(self):
        p = np.random.default_rng(4).normal(size=(256, 3))
        a = dilated_neighbor_sample(p, 32, 2, 1024, np.random.default_rng(0))
        assert a.pool == 32
        b = knn(p, 32)
        for x, y in zip(a.indices, b.indices):
            assert set(x) == set(y)

    def test_samples_distinct_from_pool(self):
        p = np.random.default_rng(5).normal(size=(128, 3))
        res = dilated_neighbor_sample(p, 8, 4, 128, np.random.default_rng(1))
        assert res.pool == 32
        pool = knn(p, 32).indices
        for i, row in enumerate(res.indices):
            assert len(set(row)) == 8 and i not in row
            assert set(row) <= set(pool[i])

    def test_deterministic_given_seed(self):
        p = np.random.default_rng(6).normal(size=(64, 3))
        a = dilated_neighbor_sample(p, 4, 4, 64, np.random.default_rng(9)).indices
        b = dilated_neighbor_sample(p, 4, 4, 64, np.random.default_rng(9)).indices
        npt.assert_array_equal(a, b)


class TestPositionSet:
    def test_direct_substitution(self):
        p = np.array([[0.0, 0, 0], [1, 2, 3]])
        ps = position_set(p, np.array([[1], [0]]))
        npt.assert_array_equal(ps[0, 0], [0, 0, 0, 1, 2, 3])

    def test_relative_half_translation_invariant(self):
        rng = np.random.default_rng(7)
        p = rng.normal(size=(10, 4))
        idx = knn(p, 3)
        shifted = p.copy()
        shifted[:, :3] += rng.normal(size=3)
        a, b = position_set(p, idx), position_set(shifted, idx)
        npt.assert_allclose(a[..., 4:], b[..., 4:], atol=1e-12)
        assert not np.allclose(a[..., :3], b[..., :3])


class TestFps:
    def test_start_zero(self):
        assert fps(LINE, 3, 0).tolist() == [0, 3, 2]

    def test_start_one_tie_to_lowest(self):
        assert fps(LINE, 3, 1).tolist() == [1, 3, 0]

    @pytest.mark.parametrize("start", range(4))
    def test_full_selection(self, start):
        assert sorted(fps(LINE, 4, start).tolist()) == [0, 1, 2, 3]

    def test_against_naive_greedy(self):
        p = np.random.default_rng(8).normal(size=(40, 3))
        assert fps(p, 12, 5).tolist() == naive_fps(p, 12, 5)

    def test_too_many(self):
        with pytest.raises(ContractError):
            fps(LINE, 5)

    def test_outlier_picked_within_two(self):
        rng = np.random.default_rng(9)
        p = rng.normal(size=(50, 3))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        p[17] = [10, 10, 10]
        assert 17 in fps(p, 2, 0).tolist()
