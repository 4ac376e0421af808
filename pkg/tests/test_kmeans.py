import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import naive_kmeans_objective
from mmil.explain.kmeans import assign_labels, kmeans_fit, objective, squared_distances


def test_separated_pairs():
    res = kmeans_fit([0.0, 0.1, 10.0, 10.1], 2, seed=0, n_init=3)
    np.testing.assert_allclose(sorted(res.centroids[:, 0]), [0.05, 10.05])


def test_one_cluster_per_point():
    pts = np.random.default_rng(0).standard_normal((6, 2))
    res = kmeans_fit(pts, 6, seed=1)
    assert res.inertia == 0.0
    assert sorted(map(tuple, res.centroids)) == sorted(map(tuple, pts))


def test_near_best_of_many_random_restarts():
    rng = np.random.default_rng(5)
    pts = rng.standard_normal((30, 2))
    ours = kmeans_fit(pts, 3, seed=0, n_init=10).inertia
    best = min(naive_kmeans_objective(pts, 3, np.random.default_rng(s)) for s in range(200))
    assert ours <= 1.05 * best


def test_comparable_to_sklearn():
    from sklearn.cluster import KMeans

    rng = np.random.default_rng(2)
    pts = np.vstack([rng.normal(c, 0.3, (40, 3)) for c in (0.0, 2.0, 5.0, 9.0)])
    ours = kmeans_fit(pts, 4, seed=0, n_init=10)
    ref = KMeans(4, n_init=10, random_state=0).fit(pts)
    assert ours.inertia <= ref.inertia_ * (1 + 1e-9)
    assert np.isclose(ours.inertia, objective(pts, ours.centroids))


def test_objective_never_increases_over_random_runs():
    rng = np.random.default_rng(11)
    for run in range(100):
        n, d, k = int(rng.integers(5, 60)), int(rng.integers(1, 5)), int(rng.integers(1, 6))
        pts = rng.standard_normal((n, d)) * rng.uniform(0.1, 10)
        hist = kmeans_fit(pts, min(k, n), seed=run).history
        assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(hist, hist[1:]))


def test_same_seed_same_result():
    pts = np.random.default_rng(3).standard_normal((50, 4))
    a, b = kmeans_fit(pts, 4, seed=7, n_init=3), kmeans_fit(pts, 4, seed=7, n_init=3)
    assert np.array_equal(a.centroids, b.centroids) and np.array_equal(a.labels, b.labels)


def test_duplicate_points_and_empty_clusters():
    pts = np.array([[0.0], [0.0], [0.0], [1.0]])
    res = kmeans_fit(pts, 3, seed=0, init=[[0.0], [0.0], [5.0]])
    assert np.isfinite(res.inertia) and res.inertia == 0.0


def test_rejects_too_few_points():
    with pytest.raises(ValueError):
        kmeans_fit([[0.0]], 2)


class TestAssign:
    def test_point_at_centroid_and_tie(self):
        c = np.array([[0.0, 0.0], [2.0, 0.0]])
        assert list(assign_labels([[2.0, 0.0], [1.0, 0.0], [0.0, 0.0]], c)) == [1, 0, 0]

    @settings(max_examples=40, deadline=None)
    @given(
        arrays(np.float64, (8, 2), elements=st.integers(-400, 400).map(lambda v: v / 4)),
        arrays(np.float64, (3, 2), elements=st.integers(-400, 400).map(lambda v: v / 4)),
        st.integers(-50, 50),
    )
    def test_translation_invariance(self, pts, cents, shift):
        # on a grid of quarter units the shift is exact, so distances are unchanged bit for bit
        assert np.array_equal(assign_labels(pts, cents), assign_labels(pts + shift, cents + shift))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        pts, cents = rng.standard_normal((100, 3)), rng.standard_normal((5, 3))
        brute = [int(np.argmin([np.sum((p - c) ** 2) for c in cents])) for p in pts]
        assert list(assign_labels(pts, cents)) == brute
        np.testing.assert_allclose(squared_distances(pts, cents).min(axis=1).sum(), objective(pts, cents))

    def test_width_mismatch(self):
        with pytest.raises(ValueError, match="width"):
            assign_labels([[1.0, 2.0]], [[1.0]])
