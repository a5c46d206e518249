"""ReLU MLP classifiers, weight norms and the norm-based generalization proxy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rng import stream


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``[D, h1, ..., K]``; every hidden layer is followed by ReLU."""

    layer_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError(f"an MLP needs at least input and output widths, got {widths}")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        if widths[-1] < 2:
            raise ValueError(f"need at least 2 classes, got {widths[-1]}")
        if self.activation != "relu":
            raise ValueError(f"only relu is supported, got {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def num_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def depth(self) -> int:
        return len(self.layer_widths) - 1

    def num_parameters(self) -> int:
        w = self.layer_widths
        return int(np.sum([w[j] * w[j + 1] + w[j + 1] for j in range(self.depth)]))


@dataclass
class ModelParams:
    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        w = self.spec.layer_widths
        if len(self.weights) != self.spec.depth or len(self.biases) != self.spec.depth:
            raise ValueError("number of weight/bias arrays does not match the spec depth")
        for j, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (w[j], w[j + 1]) or b.shape != (w[j + 1],):
                raise ValueError(
                    f"layer {j}: expected W {(w[j], w[j + 1])} and b {(w[j + 1],)}, "
                    f"got {W.shape} and {b.shape}"
                )
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ag.NonFiniteError(f"layer {j}: non-finite parameters")

    def arrays(self) -> list[np.ndarray]:
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.spec, [W.copy() for W in self.weights], [b.copy() for b in self.biases]
        )

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of spec and every parameter array."""
        if self.spec != other.spec:
            return False
        return all(
            a.tobytes() == b.tobytes() for a, b in zip(self.arrays(), other.arrays())
        )


def init_mlp(spec: MlpSpec, seed: int) -> ModelParams:
    """Uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) weights, zero biases."""
    rng = stream(seed, "init", *spec.layer_widths)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        limit = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(spec, weights, biases)


def zeros_like_spec(spec: MlpSpec) -> ModelParams:
    w = spec.layer_widths
    return ModelParams(
        spec,
        [np.zeros((w[j], w[j + 1])) for j in range(spec.depth)],
        [np.zeros(w[j + 1]) for j in range(spec.depth)],
    )


def forward_tensors(
    weights: list[Tensor], biases: list[Tensor], batch: Tensor
) -> Tensor:
    h = batch
    last = len(weights) - 1
    for j, (W, b) in enumerate(zip(weights, biases)):
        h = ag.add_bias(ag.matmul(h, W), b)
        if j < last:
            h = ag.relu(h)
    return h


def _check_batch(params: ModelParams, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ag.ShapeError(
            f"batch of shape {x.shape} does not match input dim {params.spec.input_dim}"
        )


def forward(params: ModelParams, batch) -> Tensor:
    """Logits of ``batch`` (n x D) under ``params`` as a constant tensor."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    _check_batch(params, x.data)
    return forward_tensors(
        [Tensor._wrap(W, False, None) for W in params.weights],
        [Tensor._wrap(b, False, None) for b in params.biases],
        x,
    )


def predict_logits(params: ModelParams, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Logits as a plain array, evaluated in row chunks without a tape."""
    x = np.asarray(x, dtype=np.float64)
    _check_batch(params, x)
    parts = []
    for start in range(0, x.shape[0], chunk):
        h = x[start : start + chunk]
        for j, (W, b) in enumerate(zip(params.weights, params.biases)):
            h = h @ W + b
            if j < params.spec.depth - 1:
                h = np.where(h > 0.0, h, 0.0)
        parts.append(h)
    if not parts:
        return np.zeros((0, params.spec.num_classes))
    return np.concatenate(parts, axis=0)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def frobenius_norms(params: ModelParams) -> list[float]:
    """Frobenius norm of each weight matrix; biases are not included."""
    return [float(np.sqrt(np.sum(W * W))) for W in params.weights]


def bound_proxy_from_norms(norms, m: int, B: float = 1.0) -> float:
    if m < 1:
        raise ValueError(f"sample count must be >= 1, got {m}")
    d = len(norms)
    return float(B * 2.0**d * math.prod(norms) / math.sqrt(m))


def generalization_bound_proxy(params: ModelParams, m: int) -> float:
    """``2**d * prod_j ||W_j||_F / sqrt(m)`` with the leading constant set to 1."""
    return bound_proxy_from_norms(frobenius_norms(params), m)
