"""Training pipelines for clustering-based robust classifiers.

Four pipelines share one engine:

* ``nominal``         - cross entropy on the feature net plus a linear head.
* ``magnet``          - magnet-loss fine-tuning from random initialization.
* ``clustr``          - cross-entropy warm start, drop the head, then
                        magnet-loss fine-tuning of the feature net.
* ``clustr_qtrades``  - as ``clustr`` plus a consistency term against the
                        one-step adversary, weighted by lambda.

Fine-tuning consumes neighborhood batches (a seed cluster and its nearest
clusters, at least one foreign-class cluster forced in) and refreshes the
cluster model once per epoch. An epoch passes as many instances as the
dataset holds, repetition allowed. All randomness derives from the single
config seed, one derived stream per stage, so identical (config, seed,
data) reproduce the artifact bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from clustr.attacks import _ce_objective, qtrades_batch
from clustr.clustering import ClusterModel, refresh_clusters
from clustr.datasets import LabeledDataset
from clustr.errors import InfeasibleError
from clustr.magnet import MagnetConfig, infer_batch, magnet_feature_grads, softmax
from clustr.network import IDENTITY, DenseNet, Layer, backward_batch, forward_batch, he_init

PIPELINES = ("nominal", "magnet", "clustr", "clustr_qtrades")

# stage codes for seed derivation
_STAGE_NET_INIT = 0
_STAGE_WARM_SHUFFLE = 1
_STAGE_REFRESH = 2
_STAGE_SAMPLER = 3
_STAGE_QTRADES = 4
_STAGE_HEAD_INIT = 5


def derive_seed(*parts) -> int:
    """Deterministic child seed from the root seed and stage identifiers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class ArchSpec:
    """Feature-extractor shape: ReLU hidden layers, identity feature layer."""

    input_dim: int = 2
    hidden_dims: tuple = (20, 20)
    feature_dim: int = 20

    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.feature_dim]


@dataclass
class TrainConfig:
    """Pipeline settings; defaults are the desk-scale reference values.

    Notes on scale: the hinge margin alpha defaults to 2.0 (the 12.5-ish
    values used for image benchmarks assume a far larger feature spread);
    batch shape 4 clusters x 8 samples replaces the image-scale 12 x 20.
    The second-moment decay 0.99 and epsilon 1e-4 keep the optimizer from
    amplifying the rare tiny gradients left once most hinges go inactive,
    which otherwise destabilizes late fine-tuning at this scale.
    """

    pipeline: str = "clustr"
    warm_epochs: int = 30
    finetune_epochs: int = 30
    warm_lr: float = 1e-2
    finetune_lr: float = 1e-3
    alpha: float = 2.0
    lam: float = 8.0
    k_per_class: int = 1
    clusters_per_batch: int = 4
    samples_per_cluster: int = 8
    qtrades_epsilon: float = 8.0 / 255.0
    qtrades_eta: float = 2.0 / 255.0
    batch_size: int = 32
    rng_seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-4
    grad_clip: float = 10.0
    kmeans_restarts: int = 10
    d_nearest: int | None = None

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"unknown pipeline {self.pipeline!r}")
        if self.warm_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.clusters_per_batch < 2:
            raise ValueError("clusters_per_batch must be >= 2 (foreign clusters needed)")
        if self.samples_per_cluster < 2:
            raise ValueError("samples_per_cluster must be >= 2")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    def magnet_config(self) -> MagnetConfig:
        return MagnetConfig(alpha=self.alpha, d_nearest=self.d_nearest)


@dataclass
class TrainedArtifact:
    """Final network, cluster model, per-epoch history, and the config echo."""

    net: DenseNet
    cluster_model: ClusterModel | None
    history: list[dict] = field(default_factory=list)
    config: TrainConfig | None = None
    seed: int = 0

    def to_json_dict(self) -> dict:
        return {
            "format_version": 1,
            "network": self.net.to_json_dict(),
            "cluster_model": self.cluster_model.to_json_dict() if self.cluster_model else None,
            "config": asdict(self.config) if self.config else None,
            "seed": self.seed,
        }

    @staticmethod
    def from_json_dict(doc: dict) -> "TrainedArtifact":
        if doc.get("format_version") != 1:
            raise ValueError(f"unsupported artifact format version {doc.get('format_version')!r}")
        cfg = TrainConfig(**doc["config"]) if doc.get("config") else None
        cm = ClusterModel.from_json_dict(doc["cluster_model"]) if doc.get("cluster_model") else None
        return TrainedArtifact(
            net=DenseNet.from_json_dict(doc["network"]),
            cluster_model=cm,
            config=cfg,
            seed=int(doc.get("seed", 0)),
        )


class Adam:
    """Adaptive-moment optimizer over a list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Scale the whole gradient so its global l2 norm is at most max_norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm > 0:
        scale = max_norm / total
        return [g * scale for g in grads]
    return grads


def build_feature_net(arch: ArchSpec | DenseNet, seed: int) -> DenseNet:
    if isinstance(arch, DenseNet):
        return arch.copy()
    rng = np.random.default_rng(derive_seed(seed, _STAGE_NET_INIT))
    return he_init(arch.dims(), rng)


def attach_head(net: DenseNet, num_classes: int, seed: int) -> DenseNet:
    """Append a linear classification head (identity activation)."""
    rng = np.random.default_rng(derive_seed(seed, _STAGE_HEAD_INIT))
    w = rng.standard_normal((num_classes, net.output_dim)) * np.sqrt(1.0 / net.output_dim)
    return DenseNet([*[Layer(l.weights.copy(), l.bias.copy(), l.activation) for l in net.layers],
                     Layer(w, np.zeros(num_classes), IDENTITY)])


def strip_head(net: DenseNet) -> DenseNet:
    """Drop the final linear layer, leaving the feature extractor."""
    if len(net.layers) < 2:
        raise ValueError("cannot strip the only layer")
    return DenseNet([Layer(l.weights.copy(), l.bias.copy(), l.activation) for l in net.layers[:-1]])


def nominal_accuracy(net_with_head: DenseNet, data: LabeledDataset) -> float:
    logits = forward_batch(net_with_head, data.inputs)
    return float(np.mean(np.argmax(logits, axis=1) == data.labels))


def cluster_accuracy(net: DenseNet, model: ClusterModel, mcfg: MagnetConfig, data: LabeledDataset) -> float:
    _, preds = infer_batch(forward_batch(net, data.inputs), model, mcfg)
    return float(np.mean(preds == data.labels))


def _softmax_ce_batch(logits: np.ndarray, labels: np.ndarray):
    """Mean CE over the batch and the gradient w.r.t. logits."""
    probs = softmax(logits)
    n = logits.shape[0]
    picked = np.maximum(probs[np.arange(n), labels], 1e-300)
    loss = float(-np.log(picked).mean())
    grad = probs
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def _train_ce_epochs(net, data, cfg, epochs, lr, shuffle_rng, history, phase):
    """In-place cross-entropy training of net (which must end in L logits)."""
    adam = Adam(net.parameters(), lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    n = len(data)
    for epoch in range(epochs):
        perm = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            X, y = data.inputs[idx], data.labels[idx]
            logits = forward_batch(net, X)
            loss, dlogits = _softmax_ce_batch(logits, y)
            wg, bg, _ = backward_batch(net, X, dlogits)
            grads = clip_gradients([g for pair in zip(wg, bg) for g in pair], cfg.grad_clip)
            adam.step(net.parameters(), grads)
            losses.append(loss)
        history.append(
            {
                "epoch": epoch + 1,
                "phase": phase,
                "loss": float(np.mean(losses)) if losses else float("nan"),
                "accuracy": nominal_accuracy(net, data),
            }
        )


def train_nominal(data: LabeledDataset, arch, cfg: TrainConfig) -> TrainedArtifact:
    """Cross-entropy training of the feature net plus a linear head.

    Runs for warm_epochs (the CE stage count). The returned artifact keeps
    the head attached and carries no cluster model.
    """
    if data.num_classes < 2:
        raise InfeasibleError("nominal training needs at least two classes")
    net = build_feature_net(arch, cfg.rng_seed)
    net = attach_head(net, data.num_classes, cfg.rng_seed)
    history: list[dict] = []
    shuffle_rng = np.random.default_rng(derive_seed(cfg.rng_seed, _STAGE_WARM_SHUFFLE))
    _train_ce_epochs(net, data, cfg, cfg.warm_epochs, cfg.warm_lr, shuffle_rng, history, "warm")
    return TrainedArtifact(net, None, history, cfg, cfg.rng_seed)


def sample_neighborhood_batch(
    model: ClusterModel, clusters_per_batch: int, samples_per_cluster: int, rng: np.random.Generator
) -> np.ndarray:
    """Instance indices for one neighborhood batch.

    A seed cluster is drawn uniformly among non-empty clusters, joined by
    its nearest non-empty clusters by centroid distance; if the selection
    is single-class, the farthest pick is swapped for the nearest
    foreign-class cluster so the magnet loss is always well defined.
    Clusters smaller than samples_per_cluster are sampled with
    replacement.
    """
    if model.assignments is None:
        raise InfeasibleError("cluster model carries no assignments; refresh first")
    stack, class_ids, cluster_ids = model.stacked()
    members = []
    for t in range(stack.shape[0]):
        mask = (model.assignments[:, 0] == class_ids[t]) & (model.assignments[:, 1] == cluster_ids[t])
        members.append(np.flatnonzero(mask))
    nonempty = [t for t in range(stack.shape[0]) if members[t].size > 0]
    if len({int(class_ids[t]) for t in nonempty}) < 2:
        raise InfeasibleError("neighborhood sampling needs non-empty clusters from >= 2 classes")
    seed_t = int(rng.choice(nonempty))
    others = [t for t in nonempty if t != seed_t]
    dists = np.linalg.norm(stack[others] - stack[seed_t], axis=1)
    order = [others[i] for i in np.argsort(dists, kind="stable")]
    selected = [seed_t] + order[: clusters_per_batch - 1]
    if len({int(class_ids[t]) for t in selected}) < 2:
        foreign = [t for t in order if class_ids[t] != class_ids[seed_t]]
        selected[-1] = foreign[0]
    batch = []
    for t in selected:
        pool = members[t]
        take = rng.choice(pool, size=samples_per_cluster, replace=pool.size < samples_per_cluster)
        batch.append(take)
    return np.concatenate(batch)


def _train_pipeline(data: LabeledDataset, arch, cfg: TrainConfig, qtrades: bool) -> TrainedArtifact:
    if data.num_classes < 2:
        raise InfeasibleError("training needs at least two classes")
    counts = [data.class_indices(c).size for c in range(data.num_classes)]
    if min(counts) < cfg.samples_per_cluster:
        raise InfeasibleError(
            f"smallest class has {min(counts)} instances < samples_per_cluster={cfg.samples_per_cluster}"
        )
    mcfg = cfg.magnet_config()
    history: list[dict] = []
    net = build_feature_net(arch, cfg.rng_seed)
    if cfg.warm_epochs > 0:
        with_head = attach_head(net, data.num_classes, cfg.rng_seed)
        shuffle_rng = np.random.default_rng(derive_seed(cfg.rng_seed, _STAGE_WARM_SHUFFLE))
        _train_ce_epochs(with_head, data, cfg, cfg.warm_epochs, cfg.warm_lr, shuffle_rng, history, "warm")
        net = strip_head(with_head)

    adam = Adam(net.parameters(), cfg.finetune_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    sample_rng = np.random.default_rng(derive_seed(cfg.rng_seed, _STAGE_SAMPLER))
    qtrades_rng = np.random.default_rng(derive_seed(cfg.rng_seed, _STAGE_QTRADES))
    batches_per_epoch = max(1, math.ceil(len(data) / (cfg.clusters_per_batch * cfg.samples_per_cluster)))
    use_qtrades = qtrades and cfg.lam > 0  # lam = 0 degenerates exactly to the plain pipeline

    model = refresh_clusters(
        net, data, cfg.k_per_class, cfg.kmeans_restarts, derive_seed(cfg.rng_seed, _STAGE_REFRESH, 0)
    )
    for epoch in range(cfg.finetune_epochs):
        losses = []
        for _ in range(batches_per_epoch):
            idx = sample_neighborhood_batch(model, cfg.clusters_per_batch, cfg.samples_per_cluster, sample_rng)
            X = data.inputs[idx]
            feats = forward_batch(net, X)
            classes = model.assignments[idx, 0]
            assigned = model.assignments[idx, 1]
            loss, dF = magnet_feature_grads(feats, classes, assigned, model, mcfg)
            wg, bg, _ = backward_batch(net, X, dF)
            grads = [g for pair in zip(wg, bg) for g in pair]
            if use_qtrades:
                x_adv = qtrades_batch(net, model, mcfg, X, cfg.qtrades_epsilon, cfg.qtrades_eta, qtrades_rng)
                clean_probs, _ = infer_batch(feats, model, mcfg)  # stop-gradient targets
                adv_feats = forward_batch(net, x_adv)
                values, dF_adv, _ = _ce_objective(adv_feats, model, mcfg, target_probs=clean_probs)
                loss += cfg.lam * float(values.mean())
                wg2, bg2, _ = backward_batch(net, x_adv, (cfg.lam / X.shape[0]) * dF_adv)
                grads = [a + b for a, b in zip(grads, [g for pair in zip(wg2, bg2) for g in pair])]
            grads = clip_gradients(grads, cfg.grad_clip)
            adam.step(net.parameters(), grads)
            losses.append(loss)
        model = refresh_clusters(
            net, data, cfg.k_per_class, cfg.kmeans_restarts, derive_seed(cfg.rng_seed, _STAGE_REFRESH, epoch + 1)
        )
        history.append(
            {
                "epoch": epoch + 1,
                "phase": "finetune",
                "loss": float(np.mean(losses)),
                "accuracy": cluster_accuracy(net, model, mcfg, data),
            }
        )
    return TrainedArtifact(net, model, history, cfg, cfg.rng_seed)


def train_clustr(data: LabeledDataset, arch, cfg: TrainConfig) -> TrainedArtifact:
    """Warm-start pipeline: CE for warm_epochs, drop the head, magnet
    fine-tuning with per-epoch cluster refreshes. warm_epochs=0 is the
    magnet-only cold start."""
    return _train_pipeline(data, arch, cfg, qtrades=False)


def train_clustr_qtrades(data: LabeledDataset, arch, cfg: TrainConfig) -> TrainedArtifact:
    """As train_clustr plus lam times the consistency cross entropy between
    the one-step adversary's probabilities and the clean ones (clean branch
    and the adversary itself held fixed). lam=0 reproduces train_clustr
    exactly, same code path and RNG stream."""
    return _train_pipeline(data, arch, cfg, qtrades=True)


def ce_head_cluster_ablation(data: LabeledDataset, arch, cfg: TrainConfig):
    """Train nominally, strip the head, cluster the features, and report
    (CE-head accuracy, nearest-cluster soft accuracy) on the same data."""
    artifact = train_nominal(data, arch, cfg)
    ce_acc = nominal_accuracy(artifact.net, data)
    feature_net = strip_head(artifact.net)
    model = refresh_clusters(
        feature_net, data, cfg.k_per_class, cfg.kmeans_restarts, derive_seed(cfg.rng_seed, _STAGE_REFRESH, 0)
    )
    cl_acc = cluster_accuracy(feature_net, model, cfg.magnet_config(), data)
    return ce_acc, cl_acc


def run_pipeline(data: LabeledDataset, arch, cfg: TrainConfig) -> TrainedArtifact:
    """Dispatch on cfg.pipeline."""
    if cfg.pipeline == "nominal":
        return train_nominal(data, arch, cfg)
    if cfg.pipeline == "magnet":
        return _train_pipeline(data, arch, replace(cfg, warm_epochs=0), qtrades=False)
    if cfg.pipeline == "clustr":
        return train_clustr(data, arch, cfg)
    return train_clustr_qtrades(data, arch, cfg)
