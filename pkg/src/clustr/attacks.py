"""Projected gradient attacks on clustering-based classifiers.

The engine supports elementwise signed steps under an l-inf budget and
normalized-gradient steps under an l2 budget, three ascent objectives
(cross entropy against the label, consistency cross entropy against the
clean probabilities, and the magnet training loss itself as the adaptive
attack), random restarts, plus the one-step uniformly-initialized
adversary used by the consistency training term.

Restart bookkeeping: restart 0 always starts from the clean point with
no noise, every iterate (including the start) is scored, and the engine
keeps the best iterate under (prediction flipped, objective value). Two
consequences are load-bearing for the evaluation harness: the achieved
objective can never fall below the clean objective, and a longer run or
a larger restart count with the same seeds can only improve the attack,
so robust accuracy is monotone in iterations and restarts by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from clustr.clustering import ClusterModel
from clustr.datasets import LabeledDataset
from clustr.errors import InfeasibleError
from clustr.magnet import PROB_EPS, MagnetConfig, cluster_scores, infer_batch, magnet_terms
from clustr.network import DenseNet, backward_batch, forward_batch

OBJECTIVES = ("ce_vs_label", "ce_vs_clean_probs", "magnet_loss")


@dataclass
class AttackConfig:
    """Norm, budget, step, iteration and restart counts, objective, seed."""

    norm: str = "linf"
    epsilon: float = 8.0 / 255.0
    eta: float = 2.0 / 255.0
    iterations: int = 20
    restarts: int = 10
    objective: str = "ce_vs_label"
    rng_seed: int = 0

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")


@dataclass
class AttackResult:
    """Adversarial input, whether the prediction mismatches the target label,
    and the objective value achieved."""

    x_adv: np.ndarray
    success: bool
    objective_value: float


def _input_grads(net: DenseNet, X: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    _, _, dX = backward_batch(net, X, upstream)
    return dX


def _ce_objective(F, model, cfg, label=None, target_probs=None):
    """Value, dL/dF, and predictions for the cross-entropy objectives."""
    scores, class_ids = cluster_scores(F, model, cfg)
    probs = np.zeros((F.shape[0], model.num_classes))
    for c in range(model.num_classes):
        probs[:, c] = scores[:, class_ids == c].sum(axis=1)
    preds = np.argmax(probs, axis=1)
    if target_probs is None:
        weights = np.zeros_like(probs)
        weights[np.arange(F.shape[0]), label] = 1.0
    else:
        weights = np.atleast_2d(target_probs)
    clamped = np.maximum(probs, PROB_EPS)
    values = -(weights * np.log(clamped)).sum(axis=1)
    dP = np.where(probs > PROB_EPS, -weights / clamped, 0.0)
    # chain through class sums and the cluster softmax
    dQ = dP[:, class_ids]  # dL/dq_k = dL/dp_{class(k)}
    inner = (scores * dQ).sum(axis=1, keepdims=True)
    dA = scores * (dQ - inner)
    stack, _, _ = model.stacked()
    inv_sigma = 1.0 / model.sigma_sq
    dF = -inv_sigma * (F * dA.sum(axis=1, keepdims=True) - dA @ stack)
    return values, dF, preds


def _magnet_objective(F, model, cfg, label):
    """Per-instance magnet term with the nearest own-class cluster assigned.

    Test-time inputs carry no stored training assignment, so the attacked
    instance is assigned to its label's nearest cluster at the current
    iterate before scoring; the selection is piecewise constant, so the
    gradient passes through the chosen centroid only.
    """
    stack, class_ids, cluster_ids = model.stacked()
    label = np.asarray(label, dtype=np.int64)
    diff = F[:, None, :] - stack[None, :, :]
    sq = np.einsum("ntd,ntd->nt", diff, diff)
    own_mask = class_ids[None, :] == label[:, None]
    own_sq = np.where(own_mask, sq, np.inf)
    nearest_own = np.argmin(own_sq, axis=1)
    assigned = cluster_ids[nearest_own]
    pre_hinge, own_diff, fw, stack, _ = magnet_terms(F, label, assigned, model, cfg)
    values = np.maximum(pre_hinge, 0.0)
    active = (pre_hinge > 0.0)[:, None]
    dF = active * (own_diff - (F - fw @ stack)) / model.sigma_sq
    _, preds = infer_batch(F, model, cfg)
    return values, dF, preds


def _objective(net, model, cfg, X, atk, y, clean_probs):
    F = forward_batch(net, X)
    if atk.objective == "ce_vs_label":
        values, dF, preds = _ce_objective(F, model, cfg, label=np.full(X.shape[0], y))
    elif atk.objective == "ce_vs_clean_probs":
        target = np.repeat(clean_probs[None, :], X.shape[0], axis=0)
        values, dF, preds = _ce_objective(F, model, cfg, target_probs=target)
    else:
        values, dF, preds = _magnet_objective(F, model, cfg, np.full(X.shape[0], y))
    grads = _input_grads(net, X, dF)
    return values, grads, preds


def _project_deltas(deltas, x, atk):
    """Project perturbations into the budget ball intersected with [0,1]^n."""
    if atk.norm == "linf":
        np.clip(deltas, -atk.epsilon, atk.epsilon, out=deltas)
    else:
        norms = np.linalg.norm(deltas, axis=1, keepdims=True)
        inv = np.divide(atk.epsilon, norms, where=norms > 0, out=np.ones_like(norms))
        deltas *= np.where(norms > atk.epsilon, inv, 1.0)
    # the box clamp contracts toward x, so it cannot re-break the ball
    np.clip(deltas, -x, 1.0 - x, out=deltas)
    return deltas


def pgd(
    net: DenseNet,
    model: ClusterModel,
    cfg: MagnetConfig,
    x: np.ndarray,
    y: int,
    atk: AttackConfig,
    instance_index: int = 0,
) -> AttackResult:
    """Projected-gradient ascent on the configured objective.

    Restart 0 starts exactly at x; restarts r >= 1 start from x plus
    uniform noise in [-eps, eps], clipped feasible, with the noise drawn
    from the derived seed (rng_seed, instance_index, r). l-inf mode takes
    eta * sign(gradient) steps (sign(0) = 0) and clamps elementwise into
    the budget box and [0,1]; l2 mode steps eta along the normalized
    gradient and projects onto the budget ball, then the unit box. The
    returned iterate is the best visited one, preferring prediction flips
    and breaking ties by objective value.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != net.input_dim:
        raise ValueError("x must be a single input vector of the network's input size")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("x must lie in the unit box")
    clean_probs = None
    if atk.objective == "ce_vs_clean_probs":
        clean_probs, _ = infer_batch(forward_batch(net, x[None, :]), model, cfg)
        clean_probs = clean_probs[0]

    n_restarts = atk.restarts
    deltas = np.zeros((n_restarts, x.shape[0]))
    for r in range(1, n_restarts):
        rng = np.random.default_rng([atk.rng_seed, instance_index, r])
        deltas[r] = rng.uniform(-atk.epsilon, atk.epsilon, x.shape[0])
    deltas = _project_deltas(deltas, x, atk)

    best_success = np.zeros(n_restarts, dtype=bool)
    best_value = np.full(n_restarts, -np.inf)
    best_deltas = deltas.copy()
    for step_idx in range(atk.iterations + 1):
        X = np.clip(x + deltas, 0.0, 1.0)
        values, grads, preds = _objective(net, model, cfg, X, atk, y, clean_probs)
        success = preds != y
        better = (success & ~best_success) | ((success == best_success) & (values > best_value))
        best_success |= success
        best_value = np.where(better, values, best_value)
        best_deltas[better] = deltas[better]
        if step_idx == atk.iterations:
            break
        if atk.norm == "linf":
            step = atk.eta * np.sign(grads)
        else:
            norms = np.linalg.norm(grads, axis=1, keepdims=True)
            step = atk.eta * np.divide(grads, norms, where=norms > 0, out=np.zeros_like(grads))
        deltas = _project_deltas(deltas + step, x, atk)

    order = np.lexsort((best_value, best_success))  # last key dominates
    winner = order[-1]
    x_adv = np.clip(x + best_deltas[winner], 0.0, 1.0)
    return AttackResult(x_adv, bool(best_success[winner]), float(best_value[winner]))


def qtrades_batch(
    net: DenseNet,
    model: ClusterModel,
    cfg: MagnetConfig,
    X: np.ndarray,
    epsilon: float,
    eta: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One-step adversaries for a whole batch (see qtrades_adversary)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    noise = rng.uniform(-epsilon, epsilon, X.shape) if epsilon > 0 else np.zeros_like(X)
    Xp = np.clip(X + noise, 0.0, 1.0)
    clean_probs, _ = infer_batch(forward_batch(net, X), model, cfg)  # constants: no gradient
    F = forward_batch(net, Xp)
    _, dF, _ = _ce_objective(F, model, cfg, target_probs=clean_probs)
    grads = _input_grads(net, Xp, dF)
    stepped = Xp + eta * np.sign(grads)
    deltas = np.clip(stepped - X, -epsilon, epsilon)
    np.clip(deltas, -X, 1.0 - X, out=deltas)
    return np.clip(X + deltas, 0.0, 1.0)


def qtrades_adversary(
    net: DenseNet,
    model: ClusterModel,
    cfg: MagnetConfig,
    x: np.ndarray,
    epsilon: float,
    eta: float,
    rng_seed,
) -> np.ndarray:
    """Single signed-gradient step from a uniformly noised start.

    x' = clip(x + U(-eps, eps)); one step of the consistency cross entropy
    between the perturbed and clean probability vectors (clean side held
    constant); the result is clamped into the eps-box around x intersected
    with [0,1]^n.
    """
    rng = np.random.default_rng(rng_seed)
    return qtrades_batch(net, model, cfg, np.asarray(x, dtype=np.float64)[None, :], epsilon, eta, rng)[0]


def evaluate_robust_accuracy(
    net: DenseNet,
    model: ClusterModel,
    cfg: MagnetConfig,
    data: LabeledDataset,
    atk: AttackConfig,
) -> float:
    """Fraction of instances whose prediction survives the best restart.

    An instance counts as robust only if every restart fails to make the
    prediction mismatch the label (a clean misclassification is already a
    mismatch, so eps = 0 reproduces clean accuracy).
    """
    if len(data) == 0:
        raise InfeasibleError("empty dataset")
    robust = 0
    for i in range(len(data)):
        result = pgd(net, model, cfg, data.inputs[i], int(data.labels[i]), atk, instance_index=i)
        robust += int(not result.success)
    return robust / len(data)


def epsilon_sweep(
    net: DenseNet,
    model: ClusterModel,
    cfg: MagnetConfig,
    data: LabeledDataset,
    atk: AttackConfig,
    epsilons,
) -> list[float]:
    """Robust accuracy across an ascending budget grid.

    A perturbation feasible at a smaller budget stays feasible at every
    larger one, so successes found early are carried forward; the returned
    sequence is non-increasing by construction.
    """
    epsilons = [float(e) for e in epsilons]
    if any(b < a for a, b in zip(epsilons, epsilons[1:])):
        raise ValueError("epsilons must be ascending")
    flipped = np.zeros(len(data), dtype=bool)
    accuracies = []
    for eps in epsilons:
        atk_eps = replace(atk, epsilon=eps)
        for i in range(len(data)):
            if flipped[i]:
                continue
            result = pgd(net, model, cfg, data.inputs[i], int(data.labels[i]), atk_eps, instance_index=i)
            flipped[i] = result.success
        accuracies.append(1.0 - float(flipped.mean()))
    return accuracies
