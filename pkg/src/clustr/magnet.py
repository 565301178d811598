"""Magnet loss, its feature gradient, and the soft inference rule.

This module is one concrete member of the general clustering-loss family
``combine(pull(f, own-class centroids), push(f, foreign centroids))``: a
pull term (squared distance to the assigned centroid), a push term (a
log-sum-exp over foreign-class centroids), both scaled by the shared
variance, combined through a hinge with margin alpha. Only this magnet
instance is implemented; the family is documented here as a contract
rather than exposed as a plugin surface.

Inference turns squared centroid distances into a soft class probability
by normalizing per-cluster Gaussian scores, optionally restricted to the
D globally nearest clusters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from clustr.clustering import ClusterModel, SIGMA_SQ_FLOOR
from clustr.errors import InfeasibleError

PROB_EPS = 1e-12


@dataclass
class MagnetConfig:
    """Margin alpha >= 0 and the optional nearest-cluster cutoff D."""

    alpha: float = 12.5
    d_nearest: int | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.d_nearest is not None and self.d_nearest < 1:
            raise ValueError("d_nearest must be >= 1 when set")


@dataclass
class ClassProbabilities:
    """Soft class probabilities plus the argmax (ties -> lowest class)."""

    probabilities: np.ndarray
    predicted_class: int


def _as_batch_arrays(batch, model: ClusterModel):
    """Unpack [(feature, class, cluster), ...] into dense arrays."""
    feats = np.array([np.asarray(f, dtype=np.float64) for f, _, _ in batch])
    classes = np.array([c for _, c, _ in batch], dtype=np.int64)
    assigned = np.array([j for _, _, j in batch], dtype=np.int64)
    for c, j in zip(classes, assigned):
        if not (0 <= c < model.num_classes and 0 <= j < model.centroids[c].shape[0]):
            raise ValueError(f"assigned cluster ({c}, {j}) does not exist")
    return feats, classes, assigned


def magnet_terms(
    feats: np.ndarray, classes: np.ndarray, assigned: np.ndarray, model: ClusterModel, cfg: MagnetConfig
):
    """Per-instance pre-hinge values of the magnet loss and reusable parts.

    Returns (pre_hinge, own_diff, foreign_weights, stack, class_ids) where
    pre_hinge[i] = alpha + ||f_i - mu(x_i)||^2 / (2 sigma^2)
                  + log sum_{foreign clusters} exp(-||f_i - mu||^2 / (2 sigma^2)),
    own_diff[i] = f_i - mu(x_i), and foreign_weights[i] is the softmax over
    foreign clusters used by the log-sum-exp (zero at own-class columns).
    """
    if model.sigma_sq < SIGMA_SQ_FLOOR:
        raise ValueError("model variance below the floor")
    if model.num_classes < 2:
        raise InfeasibleError("magnet loss needs at least two classes (foreign clusters)")
    stack, class_ids, _ = model.stacked()
    inv_two_sigma = 1.0 / (2.0 * model.sigma_sq)
    own_mu = np.array([model.centroids[c][j] for c, j in zip(classes, assigned)])
    own_diff = feats - own_mu
    own_term = np.einsum("nd,nd->n", own_diff, own_diff) * inv_two_sigma

    diff = feats[:, None, :] - stack[None, :, :]
    logits = -np.einsum("ntd,ntd->nt", diff, diff) * inv_two_sigma  # (N, T)
    foreign = class_ids[None, :] != classes[:, None]
    masked = np.where(foreign, logits, -np.inf)
    peak = masked.max(axis=1)  # finite: every class faces >= 1 foreign cluster
    exp_shift = np.exp(masked - peak[:, None])
    denom = exp_shift.sum(axis=1)
    lse = peak + np.log(denom)
    foreign_weights = exp_shift / denom[:, None]
    pre_hinge = cfg.alpha + own_term + lse
    return pre_hinge, own_diff, foreign_weights, stack, class_ids


def magnet_loss(batch, model: ClusterModel, cfg: MagnetConfig) -> float:
    """Batch mean of the hinged magnet terms; {x}_+ = max(0, x)."""
    feats, classes, assigned = _as_batch_arrays(batch, model)
    pre_hinge, _, _, _, _ = magnet_terms(feats, classes, assigned, model, cfg)
    return float(np.mean(np.maximum(pre_hinge, 0.0)))


def magnet_feature_grads(
    feats: np.ndarray, classes: np.ndarray, assigned: np.ndarray, model: ClusterModel, cfg: MagnetConfig
):
    """Loss value and exact per-feature gradients of the batch-mean loss.

    sigma^2 is treated as a constant (stop-gradient), matching how the
    variance is an estimated quantity rather than a trained one. Instances
    whose hinge is inactive (pre-hinge <= 0) contribute zero gradient.
    """
    pre_hinge, own_diff, fw, stack, _ = magnet_terms(feats, classes, assigned, model, cfg)
    n = feats.shape[0]
    active = pre_hinge > 0.0
    inv_sigma = 1.0 / model.sigma_sq
    # d own_term/df = (f - mu_own)/sigma^2 ; d lse/df = -sum_k w_k (f - mu_k)/sigma^2
    weighted_mu = fw @ stack
    grads = (own_diff - (feats - weighted_mu)) * inv_sigma
    grads[~active] = 0.0
    grads /= n
    loss = float(np.mean(np.maximum(pre_hinge, 0.0)))
    return loss, grads


def magnet_loss_backward(batch, model: ClusterModel, cfg: MagnetConfig) -> np.ndarray:
    """Gradient of magnet_loss w.r.t. each feature vector in the batch."""
    feats, classes, assigned = _as_batch_arrays(batch, model)
    _, grads = magnet_feature_grads(feats, classes, assigned, model, cfg)
    return grads


def cluster_scores(feats: np.ndarray, model: ClusterModel, cfg: MagnetConfig):
    """Per-cluster softmax scores behind the soft inference rule.

    Returns (scores, class_ids) where scores is (N, T), rows sum to 1 over
    the included clusters, and excluded clusters (outside the D nearest)
    hold exactly 0.
    """
    stack, class_ids, _ = model.stacked()
    diff = feats[:, None, :] - stack[None, :, :]
    sq = np.einsum("ntd,ntd->nt", diff, diff)
    logits = -sq / (2.0 * model.sigma_sq)
    if cfg.d_nearest is not None:
        if cfg.d_nearest > stack.shape[0]:
            raise ValueError("d_nearest exceeds the total cluster count")
        if cfg.d_nearest < stack.shape[0]:
            order = np.argsort(sq, axis=1, kind="stable")
            keep = np.zeros_like(logits, dtype=bool)
            np.put_along_axis(keep, order[:, : cfg.d_nearest], True, axis=1)
            logits = np.where(keep, logits, -np.inf)
    peak = logits.max(axis=1)  # finite: at least one cluster is always kept
    shifted = np.exp(logits - peak[:, None])
    scores = shifted / shifted.sum(axis=1)[:, None]
    return scores, class_ids


def infer_batch(feats: np.ndarray, model: ClusterModel, cfg: MagnetConfig):
    """Soft class probabilities for a feature batch; returns (probs, preds)."""
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    scores, class_ids = cluster_scores(feats, model, cfg)
    probs = np.zeros((feats.shape[0], model.num_classes))
    for c in range(model.num_classes):
        probs[:, c] = scores[:, class_ids == c].sum(axis=1)
    preds = np.argmax(probs, axis=1)
    return probs, preds


def infer(feature: np.ndarray, model: ClusterModel, cfg: MagnetConfig) -> ClassProbabilities:
    """Soft probability over classes for one feature vector.

    p_c is the share of the total Gaussian score sum(exp(-d^2/2 sigma^2))
    owned by class c's clusters. With d_nearest set, only the D globally
    nearest clusters enter either sum and classes with no surviving
    cluster get probability 0.
    """
    probs, preds = infer_batch(np.asarray(feature, dtype=np.float64)[None, :], model, cfg)
    return ClassProbabilities(probs[0], int(preds[0]))


def cross_entropy(probs: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Cross entropy of a probability vector against a label or distribution.

    `target` may be an integer class index or a probability vector (the
    consistency-term case). Probabilities are clamped at 1e-12 before the
    log; the gradient w.r.t. `probs` is exact on the unclamped region and
    zero where the clamp is active.
    """
    probs = np.asarray(probs, dtype=np.float64)
    clamped = np.maximum(probs, PROB_EPS)
    if np.isscalar(target) or np.ndim(target) == 0:
        y = int(target)
        if not 0 <= y < probs.shape[-1]:
            raise ValueError(f"target index {y} out of range for {probs.shape[-1]} classes")
        weights = np.zeros_like(probs)
        weights[y] = 1.0
    else:
        weights = np.asarray(target, dtype=np.float64)
        if weights.shape != probs.shape:
            raise ValueError("target distribution shape mismatch")
    loss = float(-(weights * np.log(clamped)).sum())
    grad = np.where(probs > PROB_EPS, -weights / clamped, 0.0)
    return loss, grad


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Softmax CE against a hard label; returns (loss, grad_logits, probs)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= int(label) < logits.shape[-1]:
        raise ValueError(f"target index {label} out of range for {logits.shape[-1]} classes")
    probs = softmax(logits)
    loss = float(-np.log(max(probs[int(label)], PROB_EPS)))
    grad = probs.copy()
    grad[int(label)] -= 1.0
    return loss, grad, probs
