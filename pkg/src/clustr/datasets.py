"""Synthetic 2-D binary datasets, stratified splits, and CSV persistence.

Generators rescale into [0.05, 0.95]^2 so that box-constrained attacks
have elbow room before clipping. All randomness is seeded.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from clustr.errors import DataFormatError, InfeasibleError


@dataclass
class LabeledDataset:
    """Inputs in the unit box with integer class labels."""

    inputs: np.ndarray  # (N, n), entries in [0, 1]
    labels: np.ndarray  # (N,), values in {0..L-1}
    split: str = "full"

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree in length")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ValueError("inputs must lie in the unit box")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


def _rescale_unit_box(points: np.ndarray, lo: float = 0.05, hi: float = 0.95) -> np.ndarray:
    """Affine per-coordinate map of the data bounding box into [lo, hi]."""
    mins = points.min(axis=0)
    maxs = points.max(axis=0)
    span = np.where(maxs > mins, maxs - mins, 1.0)
    return lo + (hi - lo) * (points - mins) / span


def gen_moons(n: int, noise_std: float, rng_seed) -> LabeledDataset:
    """Two interleaving half-circles with Gaussian noise.

    The arc positions are deterministic (a uniform parameter grid); only
    the noise consumes randomness, so noise_std=0 gives points exactly on
    the rescaled arcs regardless of seed.
    """
    if n < 4:
        raise InfeasibleError("need at least 4 points")
    if n % 2:
        raise InfeasibleError("n must be even")
    if noise_std < 0:
        raise InfeasibleError("noise_std must be >= 0")
    half = n // 2
    t = np.linspace(0.0, np.pi, half)
    outer = np.column_stack([np.cos(t), np.sin(t)])
    inner = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    points = np.concatenate([outer, inner], axis=0)
    rng = np.random.default_rng(rng_seed)
    points = points + rng.normal(0.0, noise_std, size=points.shape)
    labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
    return LabeledDataset(_rescale_unit_box(points), labels)


def gen_circles(n: int, gap: float, noise_std: float, rng_seed) -> LabeledDataset:
    """Two concentric rings (inner class 0, outer class 1) with noise."""
    if n < 4:
        raise InfeasibleError("need at least 4 points")
    if n % 2:
        raise InfeasibleError("n must be even")
    if gap <= 0:
        raise InfeasibleError("gap must be > 0")
    if noise_std < 0:
        raise InfeasibleError("noise_std must be >= 0")
    half = n // 2
    theta = np.linspace(0.0, 2.0 * np.pi, half, endpoint=False)
    inner = np.column_stack([np.cos(theta), np.sin(theta)])
    outer = (1.0 + gap) * np.column_stack([np.cos(theta), np.sin(theta)])
    points = np.concatenate([inner, outer], axis=0)
    rng = np.random.default_rng(rng_seed)
    points = points + rng.normal(0.0, noise_std, size=points.shape)
    labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
    return LabeledDataset(_rescale_unit_box(points), labels)


def split(data: LabeledDataset, test_fraction: float, rng_seed):
    """Stratified train/test split; class ratios preserved within one instance."""
    if not 0.0 <= test_fraction <= 1.0:
        raise InfeasibleError("test_fraction must lie in [0, 1]")
    rng = np.random.default_rng(rng_seed)
    test_idx: list[np.ndarray] = []
    train_idx: list[np.ndarray] = []
    for c in range(data.num_classes):
        idx = rng.permutation(data.class_indices(c))
        n_test = int(round(test_fraction * idx.size))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    train_sel = np.sort(np.concatenate(train_idx)) if train_idx else np.empty(0, dtype=np.int64)
    test_sel = np.sort(np.concatenate(test_idx)) if test_idx else np.empty(0, dtype=np.int64)
    train = LabeledDataset(data.inputs[train_sel], data.labels[train_sel], split="train")
    test = LabeledDataset(data.inputs[test_sel], data.labels[test_sel], split="test")
    return train, test


def save_csv(data: LabeledDataset, path) -> None:
    """Write columns x_0..x_{n-1}, label; floats at 17 significant digits."""
    path = Path(path)
    dim = data.inputs.shape[1]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x_{i}" for i in range(dim)] + ["label"])
        for row, label in zip(data.inputs, data.labels):
            writer.writerow([f"{v:.17g}" for v in row] + [int(label)])


def load_csv(path, split_tag: str = "full") -> LabeledDataset:
    """Round-trip-exact CSV loader; parse failures report the line number."""
    path = Path(path)
    inputs: list[list[float]] = []
    labels: list[int] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        dim = len(header) - 1
        if dim < 1 or header[-1] != "label":
            raise DataFormatError(f"{path}: line 1: expected columns x_0..x_{{n-1}}, label")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise DataFormatError(f"{path}: line {lineno}: expected {dim + 1} fields, got {len(row)}")
            try:
                inputs.append([float(v) for v in row[:dim]])
                labels.append(int(row[dim]))
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from None
    if not inputs:
        raise DataFormatError(f"{path}: no data rows")
    return LabeledDataset(np.array(inputs), np.array(labels), split=split_tag)
