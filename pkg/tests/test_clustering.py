import itertools

import numpy as np
import pytest

from clustr.clustering import (
    SIGMA_SQ_FLOOR,
    ClusterModel,
    fit_class_clusters,
    kmeans_pp_init,
    lloyd,
    refresh_clusters,
)
from clustr.datasets import LabeledDataset
from clustr.errors import InfeasibleError
from clustr.network import DenseNet, Layer


def brute_force_two_means(points):
    """Optimal 2-means cost by enumerating every 2-partition."""
    n = points.shape[0]
    best = np.inf
    for bits in range(1, 2 ** (n - 1)):  # fix point 0 in group A to halve the space
        mask = np.array([(bits >> i) & 1 for i in range(n)], dtype=bool)
        for group in (points[mask], points[~mask]):
            if group.shape[0] == 0:
                break
        else:
            cost = 0.0
            for group in (points[mask], points[~mask]):
                cost += np.sum((group - group.mean(axis=0)) ** 2)
            best = min(best, cost)
    return best


class TestKmeansPP:
    def test_k1_returns_one_of_the_points(self):
        points = np.array([[0.0], [3.0], [5.0]])
        c = kmeans_pp_init(points, 1, 0)
        assert c.shape == (1, 1)
        assert c[0, 0] in points[:, 0]

    def test_two_far_points(self):
        points = np.array([[0.0], [10.0]])
        c = kmeans_pp_init(points, 2, 42)
        assert sorted(c[:, 0]) == [0.0, 10.0]

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(5)
        points = rng.normal(size=(20, 2))
        a = kmeans_pp_init(points, 3, 123)
        b = kmeans_pp_init(points, 3, 123)
        assert np.array_equal(a, b)

    def test_k_exceeding_distinct_points_rejected(self):
        points = np.array([[1.0], [1.0], [2.0]])
        with pytest.raises(InfeasibleError):
            kmeans_pp_init(points, 3, 0)

    def test_k_below_one_rejected(self):
        with pytest.raises(InfeasibleError):
            kmeans_pp_init(np.array([[1.0]]), 0, 0)


class TestLloyd:
    def test_identical_points(self):
        points = np.full((5, 2), 3.0)
        centroids, assignment, inertia = lloyd(points, points[:1])
        assert np.array_equal(centroids[0], [3.0, 3.0])
        assert inertia == 0.0

    def test_hand_case(self):
        points = np.array([[0.0], [1.0], [10.0], [11.0]])
        centroids, assignment, inertia = lloyd(points, np.array([[0.0], [10.0]]))
        assert sorted(centroids[:, 0]) == [0.5, 10.5]
        assert inertia == pytest.approx(1.0)

    def test_single_point_single_centroid(self):
        points = np.array([[2.5, -1.0]])
        centroids, _, inertia = lloyd(points, np.array([[0.0, 0.0]]))
        assert np.array_equal(centroids[0], points[0])
        assert inertia == 0.0

    def test_inertia_non_increasing_in_iterations(self):
        rng = np.random.default_rng(17)
        points = rng.normal(size=(30, 2))
        init = kmeans_pp_init(points, 4, 3)
        inertias = [lloyd(points, init, max_iters=t)[2] for t in range(1, 12)]
        assert all(b <= a + 1e-12 for a, b in zip(inertias, inertias[1:]))

    def test_assignment_ties_break_low_index(self):
        points = np.array([[0.0]])
        centroids, assignment, _ = lloyd(points, np.array([[1.0], [-1.0]]), max_iters=0)
        assert assignment[0] == 0

    def test_empty_cluster_reseeded_to_farthest_point(self):
        # second centroid is so far away it gets no members; repair pulls it
        # onto the worst-served point
        points = np.array([[0.0], [1.0], [2.0], [50.0]])
        centroids, assignment, inertia = lloyd(points, np.array([[1.0], [1000.0]]))
        assert sorted(np.round(centroids[:, 0], 6)) == [1.0, 50.0]
        assert inertia == pytest.approx(2.0)

    def test_k1_centroid_is_exact_mean(self):
        rng = np.random.default_rng(2)
        points = rng.normal(size=(11, 3))
        centroids, _, _ = lloyd(points, points[:1])
        assert np.allclose(centroids[0], points.mean(axis=0), atol=1e-12)


class TestBruteForceEquivalence:
    def test_best_of_10_matches_optimal_partition(self):
        # spec target: >= 95 of 100 random small instances within 1e-9
        rng = np.random.default_rng(99)
        hits = 0
        for trial in range(100):
            n = int(rng.integers(3, 9))
            points = rng.normal(scale=2.0, size=(n, 2))
            _, _, inertia = fit_class_clusters(points, 2, restarts=10, rng_seed=trial)
            if inertia <= brute_force_two_means(points) + 1e-9:
                hits += 1
        assert hits >= 95


def scaling_net(diag):
    return DenseNet([Layer(np.diag(diag), np.zeros(len(diag)), "identity")])


class TestRefreshClusters:
    def test_k1_centroid_is_feature_mean(self):
        data = LabeledDataset(np.array([[0.1, 0.2], [0.3, 0.8], [0.9, 0.1], [0.5, 0.5]]),
                              np.array([0, 0, 1, 1]))
        net = scaling_net([1.0, 1.0])
        model = refresh_clusters(net, data, 1, restarts=3, rng_seed=0)
        assert np.allclose(model.centroids[0][0], data.inputs[:2].mean(axis=0))
        assert np.allclose(model.centroids[1][0], data.inputs[2:].mean(axis=0))

    def test_sigma_sq_hand_value(self):
        # features (0,0),(0,2) and (10,0),(10,2): residuals all 1, N-1 = 3
        net = scaling_net([10.0, 2.0])
        data = LabeledDataset(np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]),
                              np.array([0, 0, 1, 1]))
        model = refresh_clusters(net, data, 1, restarts=2, rng_seed=0)
        assert model.sigma_sq == pytest.approx(4.0 / 3.0)

    def test_sigma_floor_for_single_instance_classes(self):
        net = scaling_net([1.0])
        data = LabeledDataset(np.array([[0.2], [0.8]]), np.array([0, 1]))
        model = refresh_clusters(net, data, 1, restarts=1, rng_seed=0)
        # both instances sit exactly on their centroid: floor applies
        assert model.sigma_sq == SIGMA_SQ_FLOOR

    def test_class_smaller_than_k_rejected(self):
        net = scaling_net([1.0])
        data = LabeledDataset(np.array([[0.1], [0.2], [0.9]]), np.array([0, 0, 1]))
        with pytest.raises(InfeasibleError):
            refresh_clusters(net, data, 2, restarts=1, rng_seed=0)

    def test_deterministic(self):
        rng = np.random.default_rng(31)
        data = LabeledDataset(rng.uniform(size=(40, 2)), rng.integers(0, 2, size=40))
        net = scaling_net([1.0, 1.0])
        a = refresh_clusters(net, data, 2, restarts=5, rng_seed=7)
        b = refresh_clusters(net, data, 2, restarts=5, rng_seed=7)
        assert all(np.array_equal(x, y) for x, y in zip(a.centroids, b.centroids))
        assert a.sigma_sq == b.sigma_sq
        assert np.array_equal(a.assignments, b.assignments)

    def test_assignments_point_to_own_class(self):
        rng = np.random.default_rng(32)
        data = LabeledDataset(rng.uniform(size=(30, 2)), rng.integers(0, 3, size=30))
        model = refresh_clusters(scaling_net([1.0, 1.0]), data, 2, restarts=3, rng_seed=0)
        assert np.array_equal(model.assignments[:, 0], data.labels)
        for c, j in model.assignments:
            assert 0 <= j < model.centroids[c].shape[0]


class TestClusterModel:
    def test_requires_centroid_per_class(self):
        with pytest.raises(ValueError):
            ClusterModel(centroids=[], sigma_sq=1.0)

    def test_sigma_floor_enforced(self):
        with pytest.raises(ValueError):
            ClusterModel(centroids=[np.zeros((1, 2))], sigma_sq=0.0)

    def test_stacked_order_is_class_then_cluster(self):
        model = ClusterModel(
            centroids=[np.array([[0.0], [1.0]]), np.array([[2.0]])], sigma_sq=1.0
        )
        stack, class_ids, cluster_ids = model.stacked()
        assert np.array_equal(stack[:, 0], [0.0, 1.0, 2.0])
        assert np.array_equal(class_ids, [0, 0, 1])
        assert np.array_equal(cluster_ids, [0, 1, 0])

    def test_json_round_trip(self):
        model = ClusterModel(centroids=[np.array([[0.5, 1.5]]), np.array([[2.5, 3.5]])], sigma_sq=2.0)
        clone = ClusterModel.from_json_dict(model.to_json_dict())
        assert all(np.array_equal(a, b) for a, b in zip(model.centroids, clone.centroids))
        assert clone.sigma_sq == 2.0
