import numpy as np
import pytest

from clustr.clustering import ClusterModel
from clustr.errors import InfeasibleError
from clustr.magnet import (
    ClassProbabilities,
    MagnetConfig,
    cross_entropy,
    infer,
    infer_batch,
    magnet_loss,
    magnet_loss_backward,
    softmax_cross_entropy,
)


def two_class_model(mu1=(1.0, 0.0), mu2=(2.0, 0.0), sigma_sq=2.0):
    return ClusterModel(centroids=[np.array([mu1]), np.array([mu2])], sigma_sq=sigma_sq)


def random_model(rng, num_classes=3, k=2, d=4):
    cents = [rng.normal(scale=2.0, size=(k, d)) for _ in range(num_classes)]
    return ClusterModel(centroids=cents, sigma_sq=float(rng.uniform(0.5, 3.0)))


def random_batch(rng, model, size=6):
    batch = []
    for _ in range(size):
        c = int(rng.integers(model.num_classes))
        j = int(rng.integers(model.centroids[c].shape[0]))
        batch.append((rng.normal(size=model.feature_dim), c, j))
    return batch


class TestMagnetLoss:
    def test_hand_value_alpha_zero(self):
        model = two_class_model()
        batch = [(np.array([0.0, 0.0]), 0, 0), (np.array([3.0, 0.0]), 1, 0)]
        assert magnet_loss(batch, model, MagnetConfig(alpha=0.0)) == 0.0

    def test_hand_value_alpha_one(self):
        model = two_class_model()
        batch = [(np.array([0.0, 0.0]), 0, 0), (np.array([3.0, 0.0]), 1, 0)]
        assert magnet_loss(batch, model, MagnetConfig(alpha=1.0)) == pytest.approx(0.25)

    def test_zero_exactly_at_distance_threshold(self):
        # feature at its centroid, foreign at distance d: term = {a - d^2/(2s^2)}_+
        sigma_sq, alpha = 2.0, 1.0
        dist = np.sqrt(2 * sigma_sq * alpha)
        model = two_class_model(mu1=(0.0, 0.0), mu2=(dist, 0.0), sigma_sq=sigma_sq)
        batch = [(np.array([0.0, 0.0]), 0, 0)]
        assert magnet_loss(batch, model, MagnetConfig(alpha=alpha)) == 0.0
        closer = two_class_model(mu1=(0.0, 0.0), mu2=(0.9 * dist, 0.0), sigma_sq=sigma_sq)
        assert magnet_loss(batch, closer, MagnetConfig(alpha=alpha)) > 0.0

    def test_single_class_rejected(self):
        model = ClusterModel(centroids=[np.array([[0.0, 0.0]])], sigma_sq=1.0)
        with pytest.raises(InfeasibleError):
            magnet_loss([(np.array([0.0, 0.0]), 0, 0)], model, MagnetConfig(alpha=0.0))

    def test_alpha_monotone(self):
        rng = np.random.default_rng(3)
        model = random_model(rng)
        batch = random_batch(rng, model)
        losses = [magnet_loss(batch, model, MagnetConfig(alpha=a)) for a in (0.0, 0.5, 1.0, 2.0, 4.0)]
        assert all(b >= a - 1e-12 for a, b in zip(losses, losses[1:]))

    def test_rotation_invariance(self):
        rng = np.random.default_rng(4)
        model = random_model(rng, d=3)
        batch = random_batch(rng, model, size=5)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        rotated_model = ClusterModel(
            centroids=[c @ q.T for c in model.centroids], sigma_sq=model.sigma_sq
        )
        rotated_batch = [(q @ f, c, j) for f, c, j in batch]
        cfg = MagnetConfig(alpha=1.5)
        assert magnet_loss(batch, model, cfg) == pytest.approx(
            magnet_loss(rotated_batch, rotated_model, cfg), rel=1e-12
        )

    def test_invalid_assignment_rejected(self):
        model = two_class_model()
        with pytest.raises(ValueError):
            magnet_loss([(np.array([0.0, 0.0]), 0, 5)], model, MagnetConfig(alpha=0.0))


class TestMagnetBackward:
    def test_inactive_batch_zero_grads(self):
        model = two_class_model()
        batch = [(np.array([0.0, 0.0]), 0, 0), (np.array([3.0, 0.0]), 1, 0)]
        grads = magnet_loss_backward(batch, model, MagnetConfig(alpha=0.0))
        assert np.array_equal(grads, np.zeros((2, 2)))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        cfg = MagnetConfig(alpha=3.0)
        step = 1e-6
        for _ in range(50):
            model = random_model(rng)
            batch = random_batch(rng, model)
            grads = magnet_loss_backward(batch, model, cfg)
            for i, (f, c, j) in enumerate(batch):
                fd = np.zeros_like(f)
                for k in range(f.size):
                    e = np.zeros_like(f)
                    e[k] = step
                    hi = magnet_loss(batch[:i] + [(f + e, c, j)] + batch[i + 1:], model, cfg)
                    lo = magnet_loss(batch[:i] + [(f - e, c, j)] + batch[i + 1:], model, cfg)
                    fd[k] = (hi - lo) / (2 * step)
                denom = max(np.linalg.norm(fd), 1e-8)
                assert np.linalg.norm(grads[i] - fd) / denom <= 1e-4

    def test_alpha_shift_keeps_active_gradients(self):
        rng = np.random.default_rng(6)
        model = random_model(rng)
        batch = random_batch(rng, model)
        g1 = magnet_loss_backward(batch, model, MagnetConfig(alpha=5.0))
        g2 = magnet_loss_backward(batch, model, MagnetConfig(alpha=10.0))
        # alpha only shifts the hinge: rows active under the smaller margin
        # keep the identical gradient under the larger one
        active = np.any(g1 != 0.0, axis=1)
        assert np.allclose(g1[active], g2[active])


class TestInfer:
    def test_equidistant_split(self):
        model = two_class_model(mu1=(0.0, 0.0), mu2=(2.0, 0.0), sigma_sq=1.0)
        cp = infer(np.array([1.0, 0.0]), model, MagnetConfig(alpha=0.0))
        assert cp.probabilities == pytest.approx([0.5, 0.5])
        assert cp.predicted_class == 0  # tie -> lowest class

    def test_hand_probability(self):
        model = two_class_model(mu1=(0.0, 0.0), mu2=(0.0, 2.0), sigma_sq=2.0)
        cp = infer(np.array([0.0, 0.0]), model, MagnetConfig(alpha=0.0))
        assert cp.probabilities[0] == pytest.approx(1.0 / (1.0 + np.exp(-1.0)), abs=1e-9)

    def test_d_nearest_one_is_hard_assignment(self):
        rng = np.random.default_rng(7)
        model = random_model(rng, num_classes=3, k=2)
        cfg = MagnetConfig(alpha=0.0, d_nearest=1)
        f = rng.normal(size=model.feature_dim)
        cp = infer(f, model, cfg)
        stack, class_ids, _ = model.stacked()
        nearest = np.argmin(np.sum((stack - f) ** 2, axis=1))
        assert cp.probabilities[class_ids[nearest]] == pytest.approx(1.0)
        assert cp.predicted_class == class_ids[nearest]

    def test_normalization_with_and_without_cutoff(self):
        rng = np.random.default_rng(8)
        for _ in range(1000):
            model = random_model(rng, num_classes=int(rng.integers(2, 5)), k=int(rng.integers(1, 4)))
            f = rng.normal(scale=3.0, size=model.feature_dim)
            total = model.stacked()[0].shape[0]
            for d_nearest in (None, int(rng.integers(1, total + 1))):
                cp = infer(f, model, MagnetConfig(alpha=0.0, d_nearest=d_nearest))
                assert abs(cp.probabilities.sum() - 1.0) <= 1e-9
                assert np.all(cp.probabilities >= 0.0)

    def test_argmax_equals_nearest_centroid_at_k1(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            model = random_model(rng, num_classes=int(rng.integers(2, 5)), k=1)
            f = rng.normal(scale=3.0, size=model.feature_dim)
            cp = infer(f, model, MagnetConfig(alpha=0.0))
            stack, class_ids, _ = model.stacked()
            assert cp.predicted_class == class_ids[np.argmin(np.sum((stack - f) ** 2, axis=1))]

    def test_excluded_class_gets_zero_probability(self):
        model = ClusterModel(
            centroids=[np.array([[0.0]]), np.array([[1.0]]), np.array([[50.0]])], sigma_sq=1.0
        )
        cp = infer(np.array([0.2]), model, MagnetConfig(alpha=0.0, d_nearest=2))
        assert cp.probabilities[2] == 0.0

    def test_d_nearest_above_total_rejected(self):
        model = two_class_model()
        with pytest.raises(ValueError):
            infer(np.array([0.0, 0.0]), model, MagnetConfig(alpha=0.0, d_nearest=3))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(10)
        model = random_model(rng)
        F = rng.normal(size=(6, model.feature_dim))
        probs, preds = infer_batch(F, model, MagnetConfig(alpha=0.0))
        for i in range(6):
            cp = infer(F[i], model, MagnetConfig(alpha=0.0))
            assert np.allclose(probs[i], cp.probabilities)
            assert preds[i] == cp.predicted_class


class TestCrossEntropy:
    def test_uniform_is_log_l(self):
        for L in (2, 4, 9):
            loss, _ = cross_entropy(np.full(L, 1.0 / L), 0)
            assert loss == pytest.approx(np.log(L))

    def test_confident_correct_is_tiny(self):
        probs = np.array([1.0 - 1e-12, 1e-12])
        loss, _ = cross_entropy(probs, 0)
        assert loss == pytest.approx(1e-12, abs=1e-13)

    def test_soft_target_self_entropy(self):
        p = np.array([0.2, 0.3, 0.5])
        loss, _ = cross_entropy(p, p)
        assert loss == pytest.approx(-(p * np.log(p)).sum())

    def test_target_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(np.array([0.5, 0.5]), 2)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            L = int(rng.integers(2, 6))
            p = rng.uniform(0.05, 1.0, size=L)
            p /= p.sum()
            target = rng.uniform(size=L)
            target /= target.sum()
            _, grad = cross_entropy(p, target)
            step = 1e-7
            for k in range(L):
                e = np.zeros(L)
                e[k] = step
                fd = (cross_entropy(p + e, target)[0] - cross_entropy(p - e, target)[0]) / (2 * step)
                assert abs(grad[k] - fd) <= 1e-4 * max(abs(fd), 1.0)


class TestSoftmaxCrossEntropy:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            L = int(rng.integers(2, 6))
            logits = rng.normal(scale=2.0, size=L)
            y = int(rng.integers(L))
            _, grad, _ = softmax_cross_entropy(logits, y)
            step = 1e-6
            for k in range(L):
                e = np.zeros(L)
                e[k] = step
                fd = (softmax_cross_entropy(logits + e, y)[0] - softmax_cross_entropy(logits - e, y)[0]) / (2 * step)
                assert abs(grad[k] - fd) <= 1e-4 * max(abs(fd), 1.0)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(np.zeros(3), 3)
