"""Dense-layer building blocks with hand-written backward passes.

Every forward function returns ``(output, trace)``; the matching backward
function consumes the trace plus the upstream gradient.  Arrays are plain
float64 numpy arrays shaped ``(batch, features)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when array shapes do not conform."""


def as_matrix(x, name: str = "input") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


@dataclass
class LayerGrad:
    weight_grads: dict[str, np.ndarray] = field(default_factory=dict)
    input_grad: np.ndarray | None = None


@dataclass
class AffineTrace:
    input: np.ndarray
    weights: np.ndarray
    bias: np.ndarray


def affine_forward(x, weights, bias) -> tuple[np.ndarray, AffineTrace]:
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if x.ndim != 2 or weights.ndim != 2:
        raise ShapeError(f"affine expects 2-D input and weights, got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"affine input width d_in={x.shape[1]} does not match weights rows {weights.shape[0]}"
        )
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match d_out={weights.shape[1]}")
    out = x @ weights + bias
    return out, AffineTrace(x, weights, bias)


def affine_backward(trace: AffineTrace, upstream) -> LayerGrad:
    g = np.asarray(upstream, dtype=np.float64)
    expected = (trace.input.shape[0], trace.weights.shape[1])
    if g.shape != expected:
        raise ShapeError(f"upstream gradient shape {g.shape} != forward output shape {expected}")
    return LayerGrad(
        weight_grads={"W": trace.input.T @ g, "b": g.sum(axis=0)},
        input_grad=g @ trace.weights.T,
    )


def relu_forward(x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(mask: np.ndarray, upstream) -> np.ndarray:
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != mask.shape:
        raise ShapeError(f"relu upstream shape {g.shape} != {mask.shape}")
    return np.where(mask, g, 0.0)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_forward(x) -> tuple[np.ndarray, np.ndarray]:
    out = sigmoid(x)
    return out, out


def sigmoid_backward(out: np.ndarray, upstream) -> np.ndarray:
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != out.shape:
        raise ShapeError(f"sigmoid upstream shape {g.shape} != {out.shape}")
    return g * out * (1.0 - out)


def softmax_forward(x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    return out, out


def softmax_backward(out: np.ndarray, upstream) -> np.ndarray:
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != out.shape:
        raise ShapeError(f"softmax upstream shape {g.shape} != {out.shape}")
    return out * (g - (g * out).sum(axis=1, keepdims=True))


def concat_forward(blocks: Sequence[np.ndarray]) -> tuple[np.ndarray, list[int]]:
    """Concatenate along the feature axis; the trace is the list of block widths."""
    blocks = [np.asarray(b, dtype=np.float64) for b in blocks]
    if not blocks:
        raise ShapeError("concat needs at least one block")
    rows = {b.shape[0] for b in blocks}
    if len(rows) != 1:
        raise ShapeError(f"concat blocks disagree on batch size: {sorted(rows)}")
    return np.concatenate(blocks, axis=1), [b.shape[1] for b in blocks]


def concat_backward(widths: Sequence[int], upstream) -> list[np.ndarray]:
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape[1] != sum(widths):
        raise ShapeError(f"concat upstream width {g.shape[1]} != sum of blocks {sum(widths)}")
    cuts = np.cumsum(widths)[:-1]
    return np.split(g, cuts, axis=1)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

# Denominator floor for relative error: entries whose true gradient is below
# this are compared absolutely (finite differences cannot resolve them).
REL_ERROR_FLOOR = 1e-6


def relative_error(analytic, numeric, floor: float = REL_ERROR_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_gradient(fn: Callable[[], float], array: np.ndarray, epsilon: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn()`` with respect to ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        plus = fn()
        flat[i] = orig - epsilon
        minus = fn()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * epsilon)
    return grad


class Dense:
    """Affine layer with an optional activation, used for standalone checks."""

    def __init__(self, weights, bias, activation: str | None = None):
        if activation not in (None, "relu", "sigmoid"):
            raise ValueError(f"unknown activation {activation!r}")
        self.params = {
            "W": np.array(weights, dtype=np.float64),
            "b": np.array(bias, dtype=np.float64),
        }
        self.activation = activation

    def forward(self, x):
        out, aff = affine_forward(x, self.params["W"], self.params["b"])
        act = None
        if self.activation == "relu":
            out, act = relu_forward(out)
        elif self.activation == "sigmoid":
            out, act = sigmoid_forward(out)
        return out, (aff, act)

    def backward(self, trace, upstream) -> LayerGrad:
        aff, act = trace
        g = upstream
        if self.activation == "relu":
            g = relu_backward(act, g)
        elif self.activation == "sigmoid":
            g = sigmoid_backward(act, g)
        return affine_backward(aff, g)


@dataclass
class GradCheckReport:
    max_relative_error: float
    tolerance: float
    errors: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def finite_difference_check(
    layer,
    x,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    upstream=None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare a layer's analytic gradients against central differences.

    The scalar probed is ``sum(forward(x) * upstream)``; ``upstream`` defaults
    to a seeded random projection so every output contributes.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.array(x, dtype=np.float64)
    out, trace = layer.forward(x)
    if upstream is None:
        upstream = np.random.default_rng(seed).standard_normal(out.shape)
    upstream = np.asarray(upstream, dtype=np.float64)
    grads = layer.backward(trace, upstream)

    def scalar() -> float:
        return float(np.sum(layer.forward(x)[0] * upstream))

    errors = {"input": relative_error(grads.input_grad, numeric_gradient(scalar, x, epsilon))}
    for name, value in layer.params.items():
        errors[name] = relative_error(grads.weight_grads[name], numeric_gradient(scalar, value, epsilon))
    return GradCheckReport(max(errors.values()), tolerance, errors)
