"""Dense numerical primitives shared by every other module.

All data lives in plain float64 numpy arrays (row-major). Functions here are
pure, validate the shapes they rely on, and guarantee finite outputs so that
downstream code never has to re-check for NaN/Inf.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not line up."""


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-d array, got shape {m.shape}")
    return m


def check_finite(m: np.ndarray, what: str = "array") -> np.ndarray:
    if m.size and not np.all(np.isfinite(m)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with explicit inner-dimension checking."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}"
        )
    return check_finite(a @ b, "matmul result")


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax, stabilised by subtracting the row maximum.

    Each output row is nonnegative and sums to 1. Works on any array whose
    last axis holds the logits; empty inputs pass through unchanged.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        return m.copy()
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_vjp(weights: np.ndarray, dweights: np.ndarray) -> np.ndarray:
    """Backprop through softmax_rows: gradient w.r.t. the logits.

    ``weights`` is the softmax output; the result's rows always sum to zero
    (the softmax Jacobian annihilates the all-ones direction).
    """
    inner = np.sum(dweights * weights, axis=-1, keepdims=True)
    return weights * (dweights - inner)


@dataclass(frozen=True)
class LayerNormParams:
    """Gain/bias of a layer-normalisation step over a length-d vector."""

    gain: np.ndarray
    bias: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "gain", np.asarray(self.gain, dtype=np.float64))
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float64))
        if self.eps <= 0:
            raise ValueError("layer norm epsilon must be positive")
        if self.gain.shape != self.bias.shape or self.gain.ndim != 1:
            raise DimensionError("gain and bias must be 1-d vectors of equal length")

    @property
    def dim(self) -> int:
        return self.gain.shape[0]

    @classmethod
    def identity(cls, dim: int, eps: float = 1e-5) -> "LayerNormParams":
        return cls(np.ones(dim), np.zeros(dim), eps)


def layer_norm(x, p: LayerNormParams) -> np.ndarray:
    """Normalise a vector to zero mean / unit variance, then scale and shift.

    Uses the population (biased) variance with eps inside the square root, so
    a constant input maps to the bias vector.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != p.dim:
        raise DimensionError(f"expected a length-{p.dim} vector, got shape {x.shape}")
    return layer_norm_rows(x[None, :], p)[0]


def layer_norm_rows(x: np.ndarray, p: LayerNormParams) -> np.ndarray:
    """layer_norm applied independently to every row of (n, d)."""
    x = as_matrix(x)
    if x.shape[1] != p.dim:
        raise DimensionError(f"rows have length {x.shape[1]}, params expect {p.dim}")
    if x.shape[0] == 0:
        return x.copy()
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    xhat = xc / np.sqrt(var + p.eps)
    return check_finite(p.gain * xhat + p.bias, "layer_norm result")


def l2_normalize_rows(x: np.ndarray, min_norm: float = 1e-12) -> np.ndarray:
    """Scale every row to unit Euclidean norm (rows below min_norm untouched)."""
    x = as_matrix(x)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, min_norm)


@dataclass(frozen=True)
class LinearMap:
    """Affine map y = W x + b with W of shape (out, in); bias is optional."""

    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = as_matrix(self.weight)
        check_finite(w, "linear weight")
        object.__setattr__(self, "weight", w)
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float64)
            if b.shape != (w.shape[0],):
                raise DimensionError(
                    f"bias length {b.shape} does not match {w.shape[0]} outputs"
                )
            object.__setattr__(self, "bias", b)

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    def apply_rows(self, x: np.ndarray) -> np.ndarray:
        """Apply to every row of (n, in), producing (n, out)."""
        x = as_matrix(x)
        if x.shape[1] != self.in_dim:
            raise DimensionError(
                f"input rows have length {x.shape[1]}, map expects {self.in_dim}"
            )
        y = x @ self.weight.T
        if self.bias is not None:
            y = y + self.bias
        return y
