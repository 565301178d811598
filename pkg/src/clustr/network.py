"""Dense feedforward networks with exact manual gradients.

The feature extractor is a plain stack of affine layers with ReLU or
identity activations, evaluated in float64. Besides forward/backward,
the module provides a global Lipschitz upper bound: the product of the
per-layer spectral norms (ReLU is 1-Lipschitz), each obtained by power
iteration from a fixed seeded start vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

RELU = "relu"
IDENTITY = "identity"

_FORMAT_VERSION = 1
# fixed start-vector seed so spectral norms are reproducible across runs
_POWER_ITERATION_SEED = 20240 + 7
_POWER_ITERATION_TOL = 1e-8
_POWER_ITERATION_CAP = 10_000


@dataclass
class Layer:
    """One affine layer: y = act(W x + b), W of shape (out, in)."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = IDENTITY

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("layer weights must be a 2-D matrix")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias length must match the weight row count")
        if self.activation not in (RELU, IDENTITY):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("layer parameters must be finite")


@dataclass
class DenseNet:
    """Feedforward feature map f: R^n -> R^d as an ordered list of layers.

    Invariants: consecutive layer dimensions chain, all parameters are
    finite, and the last layer's activation is identity so features live
    in an unconstrained R^d.
    """

    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.weights.shape[1] != prev.weights.shape[0]:
                raise ValueError("consecutive layer dimensions do not chain")
        if self.layers[-1].activation != IDENTITY:
            raise ValueError("the last layer must use the identity activation")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weights.shape[0]

    def parameters(self) -> list[np.ndarray]:
        """Flat list [W_0, b_0, W_1, b_1, ...]; arrays are the live ones."""
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.append(layer.weights)
            out.append(layer.bias)
        return out

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def to_json_dict(self) -> dict:
        return {
            "format_version": _FORMAT_VERSION,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "layers": [
                {
                    "weights": layer.weights.tolist(),  # row-major
                    "bias": layer.bias.tolist(),
                    "activation": layer.activation,
                }
                for layer in self.layers
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    @staticmethod
    def from_json_dict(doc: dict) -> "DenseNet":
        if doc.get("format_version") != _FORMAT_VERSION:
            raise ValueError(f"unsupported network format version {doc.get('format_version')!r}")
        net = DenseNet(
            [Layer(np.array(l["weights"]), np.array(l["bias"]), l["activation"]) for l in doc["layers"]]
        )
        if net.input_dim != doc["input_dim"] or net.output_dim != doc["output_dim"]:
            raise ValueError("declared dimensions do not match the layer shapes")
        return net

    @staticmethod
    def from_json(text: str) -> "DenseNet":
        return DenseNet.from_json_dict(json.loads(text))


@dataclass
class GradientBundle:
    """Gradients of <upstream, f(x)> w.r.t. parameters and the input."""

    weight_grads: list[np.ndarray]
    bias_grads: list[np.ndarray]
    input_grad: np.ndarray
    value: float


def he_init(dims: list[int], rng: np.random.Generator, final_identity: bool = True) -> DenseNet:
    """Random net with ReLU hidden layers, He-scaled weights, zero biases."""
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        act = IDENTITY if (final_identity and i == len(dims) - 2) else RELU
        w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        layers.append(Layer(w, np.zeros(fan_out), act))
    return DenseNet(layers)


def _check_input(net: DenseNet, x: np.ndarray, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.input_dim:
        raise ValueError(f"{name} has length {x.shape[-1]}, expected {net.input_dim}")
    return x


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    """Feature vector f(x) for a single input. Pure and deterministic."""
    x = _check_input(net, x)
    if x.ndim != 1:
        raise ValueError("forward expects a single input vector; use forward_batch")
    return forward_batch(net, x[None, :])[0]


def forward_batch(net: DenseNet, X: np.ndarray) -> np.ndarray:
    """Features for a batch of inputs, shape (N, n) -> (N, d)."""
    H = _check_input(net, np.atleast_2d(X), "X")
    for layer in net.layers:
        Z = H @ layer.weights.T + layer.bias
        H = np.maximum(Z, 0.0) if layer.activation == RELU else Z
    return H


def _forward_cached(net: DenseNet, X: np.ndarray):
    """Forward pass keeping the per-layer inputs and pre-activations."""
    inputs = []      # H_{l-1} fed into layer l
    preacts = []     # Z_l
    H = X
    for layer in net.layers:
        inputs.append(H)
        Z = H @ layer.weights.T + layer.bias
        preacts.append(Z)
        H = np.maximum(Z, 0.0) if layer.activation == RELU else Z
    return H, inputs, preacts


def backward_batch(net: DenseNet, X: np.ndarray, upstream: np.ndarray):
    """Reverse-mode gradients for a batch.

    `upstream` is dL/dF with shape (N, d). Returns (weight_grads,
    bias_grads, input_grads) with parameter gradients summed over the
    batch and input gradients per row. The ReLU subgradient at exactly 0
    is taken as 0.
    """
    X = _check_input(net, np.atleast_2d(X), "X")
    upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if upstream.shape != (X.shape[0], net.output_dim):
        raise ValueError(
            f"upstream has shape {upstream.shape}, expected {(X.shape[0], net.output_dim)}"
        )
    _, inputs, preacts = _forward_cached(net, X)
    weight_grads = [np.empty(0)] * len(net.layers)
    bias_grads = [np.empty(0)] * len(net.layers)
    dH = upstream
    for l in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[l]
        dZ = dH * (preacts[l] > 0.0) if layer.activation == RELU else dH
        weight_grads[l] = dZ.T @ inputs[l]
        bias_grads[l] = dZ.sum(axis=0)
        dH = dZ @ layer.weights
    return weight_grads, bias_grads, dH


def backward(net: DenseNet, x: np.ndarray, upstream: np.ndarray) -> GradientBundle:
    """Exact gradients of <upstream, f(x)> w.r.t. parameters and input."""
    x = _check_input(net, x)
    if x.ndim != 1:
        raise ValueError("backward expects a single input vector")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (net.output_dim,):
        raise ValueError(f"upstream has length {upstream.shape}, expected {net.output_dim}")
    f = forward(net, x)
    wg, bg, dX = backward_batch(net, x[None, :], upstream[None, :])
    return GradientBundle(wg, bg, dX[0], float(upstream @ f))


def spectral_norm(W: np.ndarray) -> float:
    """Largest singular value of W by power iteration.

    Runs from a fixed seeded start vector to relative tolerance 1e-8 with
    a 10^4 iteration cap, so the result is deterministic. A zero matrix
    returns 0.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError("spectral_norm expects a matrix")
    if not np.all(np.isfinite(W)):
        raise ValueError("matrix entries must be finite")
    if not np.any(W):
        return 0.0
    rng = np.random.default_rng(_POWER_ITERATION_SEED)
    v = rng.standard_normal(W.shape[1])
    v /= np.linalg.norm(v)
    sigma_prev = 0.0
    sigma = 0.0
    for _ in range(_POWER_ITERATION_CAP):
        Wv = W @ v
        norm_Wv = np.linalg.norm(Wv)
        if norm_Wv == 0.0:
            # v landed in the null space; restart from a fresh direction
            v = rng.standard_normal(W.shape[1])
            v /= np.linalg.norm(v)
            continue
        # same-norm quotient keeps exact cases (e.g. identity) exact
        sigma = float(norm_Wv / np.linalg.norm(v))
        if abs(sigma - sigma_prev) <= _POWER_ITERATION_TOL * sigma:
            return sigma
        sigma_prev = sigma
        v = W.T @ Wv
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return sigma
        v /= nv
    return sigma


def lipschitz_upper_bound(net: DenseNet) -> float:
    """Global Lipschitz upper bound: product of per-layer spectral norms.

    ReLU is 1-Lipschitz, so the affine parts bound the whole map. This is
    conservative: a looser constant can only shrink certified radii, never
    invalidate them.
    """
    bound = 1.0
    for layer in net.layers:
        bound *= spectral_norm(layer.weights)
    return bound
