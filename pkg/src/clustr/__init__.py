"""Clustering-based robust classification at desk scale.

A numpy library for training distance-based (clustering) classifiers with
the magnet loss, computing their closed-form l2 robustness certificates,
and stress-testing those certificates with projected-gradient attacks.
"""

__version__ = "0.1.0"

from clustr.network import DenseNet, Layer, forward, backward, spectral_norm, lipschitz_upper_bound
from clustr.clustering import ClusterModel, kmeans_pp_init, lloyd, refresh_clusters
from clustr.magnet import MagnetConfig, ClassProbabilities, magnet_loss, magnet_loss_backward, infer
from clustr.certify import CertificateReport, CertifiedCurve, robust_radius, certified_curve
from clustr.attacks import AttackConfig, AttackResult, pgd, qtrades_adversary, evaluate_robust_accuracy
from clustr.datasets import LabeledDataset, gen_moons, gen_circles, split
from clustr.train import TrainConfig, ArchSpec, TrainedArtifact, train_nominal, train_clustr, train_clustr_qtrades

__all__ = [
    "DenseNet", "Layer", "forward", "backward", "spectral_norm", "lipschitz_upper_bound",
    "ClusterModel", "kmeans_pp_init", "lloyd", "refresh_clusters",
    "MagnetConfig", "ClassProbabilities", "magnet_loss", "magnet_loss_backward", "infer",
    "CertificateReport", "CertifiedCurve", "robust_radius", "certified_curve",
    "AttackConfig", "AttackResult", "pgd", "qtrades_adversary", "evaluate_robust_accuracy",
    "LabeledDataset", "gen_moons", "gen_circles", "split",
    "TrainConfig", "ArchSpec", "TrainedArtifact", "train_nominal", "train_clustr", "train_clustr_qtrades",
]
