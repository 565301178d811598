"""Closed-form l2 robustness certificates for clustering classifiers.

For a feature f with nearest centroid mu1 and nearest foreign-class
centroid mu2, any input perturbation with l2 norm below

    (||f - mu2||^2 - ||f - mu1||^2) / (2 * L * ||mu2 - mu1||)

cannot change the nearest-centroid prediction, where L is a Lipschitz
upper bound of the feature map. The bound is tight at the feature level:
moving the feature just past L * radius along (mu2 - mu1) crosses the
bisector, which is the decision boundary of the nearest-centroid rule
(the class regions form a Voronoi diagram over the centroids).

Certification always uses the hard nearest-centroid prediction; with one
cluster per class this coincides with the soft inference argmax.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from clustr.attacks import AttackConfig, pgd
from clustr.clustering import ClusterModel
from clustr.datasets import LabeledDataset
from clustr.errors import DegenerateModelError, InfeasibleError
from clustr.magnet import MagnetConfig
from clustr.network import DenseNet, forward_batch

TIGHTNESS_OVERSHOOT = 1e-6


@dataclass
class CertificateReport:
    """Certificate for one input: prediction, correctness, radius, and the
    competing centroid pair (class, cluster index) that produced it."""

    predicted_class: int
    correct: bool
    radius: float
    mu1_id: tuple[int, int]
    mu2_id: tuple[int, int]
    lipschitz_used: float


@dataclass
class CertifiedCurve:
    """Certified accuracy over an ascending radius grid plus trapezoid AUC."""

    radii: np.ndarray
    certified_accuracy: np.ndarray
    auc: float


def _pair_indices(feats: np.ndarray, model: ClusterModel):
    """Rows into the stacked centroid array for (mu1, mu2) per feature.

    mu1 is the globally nearest cluster, mu2 the nearest cluster of any
    other class; ties break toward the lowest (class, cluster) pair, which
    is the stacked row order.
    """
    stack, class_ids, _ = model.stacked()
    diff = feats[:, None, :] - stack[None, :, :]
    sq = np.einsum("ntd,ntd->nt", diff, diff)
    i1 = np.argmin(sq, axis=1)
    foreign = class_ids[None, :] != class_ids[i1][:, None]
    sq_foreign = np.where(foreign, sq, np.inf)
    i2 = np.argmin(sq_foreign, axis=1)
    return i1, i2, sq, stack, class_ids


def select_centroid_pair(feature: np.ndarray, model: ClusterModel):
    """(class, cluster) ids of the nearest centroid and the nearest
    foreign-class centroid for one feature vector."""
    if model.num_classes < 2:
        raise InfeasibleError("need at least two classes to pick a competing pair")
    feats = np.asarray(feature, dtype=np.float64)[None, :]
    i1, i2, _, _, class_ids = _pair_indices(feats, model)
    _, _, cluster_ids = model.stacked()
    mu1_id = (int(class_ids[i1[0]]), int(cluster_ids[i1[0]]))
    mu2_id = (int(class_ids[i2[0]]), int(cluster_ids[i2[0]]))
    return mu1_id, mu2_id


def _radius_from_pair(sq1, sq2, mu1, mu2, lipschitz):
    gap = np.linalg.norm(mu2 - mu1, axis=-1)
    if np.any(gap == 0.0):
        raise DegenerateModelError("nearest centroids of two classes coincide")
    # numerator >= 0 up to rounding because mu1 is the global argmin
    return np.maximum(0.0, (sq2 - sq1) / (2.0 * lipschitz * gap))


def robust_radius(feature: np.ndarray, model: ClusterModel, lipschitz: float) -> float:
    """Certified l2 input radius for one feature vector.

    Zero exactly when the two leading squared distances tie, i.e. the
    feature sits on the decision boundary.
    """
    if lipschitz <= 0:
        raise ValueError("lipschitz bound must be > 0")
    if model.num_classes < 2:
        raise InfeasibleError("need at least two classes")
    feats = np.asarray(feature, dtype=np.float64)[None, :]
    i1, i2, sq, stack, _ = _pair_indices(feats, model)
    r = _radius_from_pair(sq[0, i1[0]], sq[0, i2[0]], stack[i1[0]], stack[i2[0]], lipschitz)
    return float(r)


def certify_inputs(
    net: DenseNet, model: ClusterModel, data: LabeledDataset, lipschitz: float
) -> list[CertificateReport]:
    """Certificates for every input: nearest-centroid prediction,
    correctness against the label, and the certified radius."""
    if lipschitz <= 0:
        raise ValueError("lipschitz bound must be > 0")
    if model.num_classes < 2:
        raise InfeasibleError("need at least two classes")
    feats = forward_batch(net, data.inputs)
    i1, i2, sq, stack, class_ids = _pair_indices(feats, model)
    _, _, cluster_ids = model.stacked()
    rows = np.arange(feats.shape[0])
    radii = _radius_from_pair(sq[rows, i1], sq[rows, i2], stack[i1], stack[i2], lipschitz)
    reports = []
    for k in rows:
        pred = int(class_ids[i1[k]])
        reports.append(
            CertificateReport(
                predicted_class=pred,
                correct=pred == int(data.labels[k]),
                radius=float(radii[k]),
                mu1_id=(int(class_ids[i1[k]]), int(cluster_ids[i1[k]])),
                mu2_id=(int(class_ids[i2[k]]), int(cluster_ids[i2[k]])),
                lipschitz_used=float(lipschitz),
            )
        )
    return reports


def certified_curve(
    net: DenseNet,
    model: ClusterModel,
    cfg: MagnetConfig,
    data: LabeledDataset,
    radii_grid,
    lipschitz: float,
) -> CertifiedCurve:
    """Fraction of inputs that are correct with radius strictly above each
    grid value; AUC by the trapezoid rule over the grid."""
    radii_grid = np.asarray(radii_grid, dtype=np.float64)
    if radii_grid.size == 0 or len(data) == 0:
        raise InfeasibleError("need a non-empty dataset and radius grid")
    if np.any(np.diff(radii_grid) < 0):
        raise ValueError("radius grid must be ascending")
    reports = certify_inputs(net, model, data, lipschitz)
    correct = np.array([r.correct for r in reports])
    radius = np.array([r.radius for r in reports])
    curve = np.array([np.mean(correct & (radius > r)) for r in radii_grid])
    auc = float(np.trapezoid(curve, radii_grid)) if radii_grid.size > 1 else 0.0
    return CertifiedCurve(radii_grid, curve, auc)


def _nearest_centroid_class(feats: np.ndarray, model: ClusterModel) -> np.ndarray:
    stack, class_ids, _ = model.stacked()
    diff = feats[:, None, :] - stack[None, :, :]
    sq = np.einsum("ntd,ntd->nt", diff, diff)
    return class_ids[np.argmin(sq, axis=1)]


def tightness_witness(
    feature: np.ndarray, model: ClusterModel, lipschitz: float, radius: float
) -> bool:
    """Check the bound is tight at the feature level.

    Moves the feature by (1 + 1e-6) * L * radius along the unit vector
    from mu1 to mu2 (the extremal direction) and reports whether the
    nearest-centroid class changes. A zero radius means the feature is on
    the boundary already, which is trivially tight.
    """
    feature = np.asarray(feature, dtype=np.float64)
    if radius == 0.0:
        return True
    mu1_id, mu2_id = select_centroid_pair(feature, model)
    mu1 = model.centroids[mu1_id[0]][mu1_id[1]]
    mu2 = model.centroids[mu2_id[0]][mu2_id[1]]
    direction = (mu2 - mu1) / np.linalg.norm(mu2 - mu1)
    moved = feature + (1.0 + TIGHTNESS_OVERSHOOT) * lipschitz * radius * direction
    flipped_class = _nearest_centroid_class(moved[None, :], model)[0]
    return int(flipped_class) != mu1_id[0]


def attack_falsification(
    net: DenseNet,
    model: ClusterModel,
    cfg: MagnetConfig,
    data: LabeledDataset,
    lipschitz: float,
    budget_fraction: float = 0.99,
    attack: AttackConfig | None = None,
    max_inputs: int | None = None,
) -> int:
    """Empirical soundness check: l2 attacks inside the certified radius.

    Every input with a positive radius is attacked with budget
    budget_fraction * radius and a step of budget/10 (the configured eta
    is rescaled per input so the attack can both traverse and refine);
    a flip of the nearest-centroid prediction counts as a violation.
    A sound certificate yields exactly 0.
    """
    if attack is None:
        attack = AttackConfig(norm="l2", epsilon=1.0, eta=0.01, iterations=100, restarts=50)
    if attack.norm != "l2":
        raise ValueError("falsification attacks the l2 certificate; use an l2 attack")
    reports = certify_inputs(net, model, data, lipschitz)
    violations = 0
    tested = 0
    for i, rep in enumerate(reports):
        if rep.radius <= 0.0:
            continue
        if max_inputs is not None and tested >= max_inputs:
            break
        tested += 1
        budget = budget_fraction * rep.radius
        atk = replace(attack, epsilon=budget, eta=max(budget / 10.0, 1e-12))
        result = pgd(net, model, cfg, data.inputs[i], rep.predicted_class, atk, instance_index=i)
        adv_pred = _nearest_centroid_class(forward_batch(net, result.x_adv[None, :]), model)[0]
        if int(adv_pred) != rep.predicted_class:
            violations += 1
    return violations
