"""Shared fully-connected ReLU feature extractor with exact reverse-mode gradients.

The network maps inputs x in R^D to nonnegative feature vectors phi(x) in R^K
(ReLU is applied after every layer, and the feature vector is the
post-activation output of the last layer). The GP output layer lives
elsewhere; this module only provides the trunk and its gradients.

No autodiff framework: forward/backward are written out so that gradients
can be validated against finite differences to tight tolerances.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, DimensionMismatch, StaleCache, TruncatedFile

CHECKPOINT_MAGIC = b"FRCLNET1"


@dataclass
class ParamGrad:
    """Per-parameter gradients, shape-congruent with a FeatureNet."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def add_(self, other: "ParamGrad", scale: float = 1.0) -> "ParamGrad":
        for a, b in zip(self.arrays(), other.arrays()):
            a += scale * b
        return self

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(a))) if a.size else 0.0 for a in self.arrays())


class FeatureNet:
    """Multilayer perceptron phi(x; theta) with ReLU after every layer.

    weights[i] has shape (fan_in, fan_out); forward computes
    relu(... relu(X @ W0 + b0) ... @ W_{L-1} + b_{L-1}).

    `version` increments whenever parameters change in place (call
    `touch()` after mutating); forward caches record the version so a
    backward pass can detect stale activations.
    """

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases):
            raise DimensionMismatch("weights and biases must pair up")
        for W, b in zip(weights, biases):
            if W.shape[1] != b.shape[0]:
                raise DimensionMismatch(f"bias {b.shape} does not match weight {W.shape}")
        for Wa, Wb in zip(weights[:-1], weights[1:]):
            if Wa.shape[1] != Wb.shape[0]:
                raise DimensionMismatch("consecutive layer dimensions do not conform")
        self.weights = [np.asarray(W, dtype=np.float64) for W in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.version = 0

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[1]

    def param_count(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def param_arrays(self) -> list[np.ndarray]:
        """Live references to all parameter arrays (weights then biases)."""
        return list(self.weights) + list(self.biases)

    def touch(self) -> None:
        """Invalidate outstanding forward caches after an in-place update."""
        self.version += 1

    def copy(self) -> "FeatureNet":
        return FeatureNet([W.copy() for W in self.weights], [b.copy() for b in self.biases])


@dataclass
class ForwardCache:
    """Activations of one forward pass, keyed to (input, parameter version)."""

    X: np.ndarray
    version: int
    activations: list[np.ndarray] = field(default_factory=list)  # A_0 .. A_L


def init_net(layer_sizes: list[int], seed: int) -> FeatureNet:
    """Glorot-uniform weights (half-width sqrt(6/(fan_in+fan_out))), zero biases."""
    if len(layer_sizes) < 2:
        raise DimensionMismatch("need at least one layer (two sizes)")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        half_width = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-half_width, half_width, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return FeatureNet(weights, biases)


def forward(net: FeatureNet, X: np.ndarray) -> np.ndarray:
    """Feature matrix with row j = phi(x_j); pure function of (net, X)."""
    return forward_cached(net, X).activations[-1]


def forward_cached(net: FeatureNet, X: np.ndarray) -> ForwardCache:
    """Forward pass keeping per-layer activations for a later backward."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise DimensionMismatch(f"expected (B, {net.input_dim}) input, got {X.shape}")
    cache = ForwardCache(X=X, version=net.version, activations=[X])
    A = X
    for W, b in zip(net.weights, net.biases):
        A = np.maximum(A @ W + b, 0.0)
        cache.activations.append(A)
    return cache


def backward(
    net: FeatureNet,
    X: np.ndarray,
    cotangent: np.ndarray,
    cache: ForwardCache | None = None,
) -> ParamGrad:
    """Accumulate sum_j (d phi(x_j)/d theta)^T @ cotangent_j.

    With a cache from `forward_cached`, activations are reused after
    checking the cache still corresponds to (X, current parameters);
    otherwise the forward pass is recomputed.
    """
    X = np.asarray(X, dtype=np.float64)
    if cache is None:
        cache = forward_cached(net, X)
    else:
        if cache.version != net.version:
            raise StaleCache("parameters changed since the cached forward pass")
        if cache.X.shape != X.shape or not np.array_equal(cache.X, X):
            raise StaleCache("cache was built for a different input batch")
    cotangent = np.asarray(cotangent, dtype=np.float64)
    B, K = X.shape[0], net.feature_dim
    if cotangent.shape != (B, K):
        raise DimensionMismatch(f"cotangent shape {cotangent.shape}, expected {(B, K)}")

    grad_w = [np.empty_like(W) for W in net.weights]
    grad_b = [np.empty_like(b) for b in net.biases]
    D = cotangent
    for i in range(len(net.weights) - 1, -1, -1):
        # Post-activation A_{i+1} > 0 iff pre-activation > 0: reuse it as the mask.
        D = D * (cache.activations[i + 1] > 0.0)
        grad_w[i] = cache.activations[i].T @ D
        grad_b[i] = D.sum(axis=0)
        if i > 0:
            D = D @ net.weights[i].T
    return ParamGrad(weights=grad_w, biases=grad_b)


def zero_grad(net: FeatureNet) -> ParamGrad:
    return ParamGrad(
        weights=[np.zeros_like(W) for W in net.weights],
        biases=[np.zeros_like(b) for b in net.biases],
    )


def save_net(net: FeatureNet, path) -> None:
    """Binary checkpoint: magic, layer count, layer sizes, then raw arrays.

    All integers int64 little-endian; arrays float64 little-endian,
    row-major, weight then bias per layer.
    """
    sizes = net.layer_sizes
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<q", len(sizes)))
        fh.write(struct.pack(f"<{len(sizes)}q", *sizes))
        for W, b in zip(net.weights, net.biases):
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_net(path) -> FeatureNet:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise BadMagic(f"expected {CHECKPOINT_MAGIC!r}, got {magic!r}")
        raw = fh.read(8)
        if len(raw) < 8:
            raise TruncatedFile("missing layer count")
        (n_sizes,) = struct.unpack("<q", raw)
        raw = fh.read(8 * n_sizes)
        if len(raw) < 8 * n_sizes:
            raise TruncatedFile("missing layer sizes")
        sizes = list(struct.unpack(f"<{n_sizes}q", raw))
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            need = 8 * (fan_in * fan_out + fan_out)
            raw = fh.read(need)
            if len(raw) < need:
                raise TruncatedFile("missing parameter data")
            W = np.frombuffer(raw[: 8 * fan_in * fan_out], dtype="<f8").reshape(fan_in, fan_out)
            b = np.frombuffer(raw[8 * fan_in * fan_out :], dtype="<f8")
            weights.append(W.astype(np.float64))
            biases.append(b.astype(np.float64))
    return FeatureNet(weights, biases)
