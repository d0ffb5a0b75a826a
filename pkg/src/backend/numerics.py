"""
Dense float64 linear algebra helpers, activations, the seeded random stream
and the finite-difference gradient oracle.

Every function here is pure: inputs are never modified.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
import numpy.typing as npt

from src.backend.errors import DimMismatch, NonPositiveTemperature, ShapeMismatch, ZeroRow

Matrix = npt.NDArray[np.float64]
Vector = npt.NDArray[np.float64]

_ZERO_NORM = 1e-30
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715
# Rows per block when materialising elementwise products for similarity.
_SIM_BLOCK = 256


def as_matrix(values, cols: int | None = None) -> Matrix:
    """Coerce ``values`` to a 2-D float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if cols is None else arr.reshape(-1, cols)
    if arr.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------

def row_norms(M: Matrix) -> Vector:
    return np.sqrt(np.sum(M * M, axis=1))


def l2_normalize_rows(M: Matrix) -> Matrix:
    M = as_matrix(M)
    norms = row_norms(M)
    if M.shape[0] and np.any(norms < _ZERO_NORM):
        bad = int(np.argmax(norms < _ZERO_NORM))
        raise ZeroRow(f"row {bad} has norm {norms[bad]!r}; cannot normalise")
    return M / norms[:, None]


def l2_normalize_rows_backward(x: Matrix, y: Matrix, dy: Matrix) -> Matrix:
    """
    Gradient through ``y = x / ||x||`` row-wise: (I - y yᵀ) dy / ||x||.
    """
    norms = row_norms(x)
    radial = np.sum(y * dy, axis=1, keepdims=True)
    return (dy - y * radial) / norms[:, None]


def rows_are_normalized(M: Matrix, tolerance: float) -> bool:
    if M.shape[0] == 0:
        return True
    return bool(np.all(np.abs(row_norms(M) - 1.0) <= tolerance))


# ---------------------------------------------------------------------------
# Similarity and softmax
# ---------------------------------------------------------------------------

def similarity_matrix(F: Matrix, G: Matrix) -> Matrix:
    """
    S[i][j] = sum_d F[i][d] * G[j][d].

    Each entry is reduced along the contiguous feature axis of an explicit
    elementwise product, so the result does not depend on argument order:
    similarity_matrix(F, G) is bit-identical to similarity_matrix(G, F).T.
    """
    F = as_matrix(F)
    G = as_matrix(G)
    if F.shape[1] != G.shape[1]:
        raise DimMismatch(f"column counts differ: {F.shape[1]} vs {G.shape[1]}")
    n, m = F.shape[0], G.shape[0]
    S = np.empty((n, m), dtype=np.float64)
    for start in range(0, n, _SIM_BLOCK):
        block = F[start:start + _SIM_BLOCK]
        S[start:start + block.shape[0]] = np.sum(block[:, None, :] * G[None, :, :], axis=2)
    return S


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {tau!r}")


def logsumexp_rows(Z: Matrix) -> Vector:
    row_max = np.max(Z, axis=1, keepdims=True)
    return (row_max + np.log(np.sum(np.exp(Z - row_max), axis=1, keepdims=True)))[:, 0]


def log_softmax_rows(S: Matrix, tau: float) -> Matrix:
    _check_tau(tau)
    Z = np.ascontiguousarray(as_matrix(S)) / tau
    return Z - logsumexp_rows(Z)[:, None]


def softmax_rows(S: Matrix, tau: float) -> Matrix:
    return np.exp(log_softmax_rows(S, tau))


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def gelu(x: Matrix) -> Matrix:
    """Tanh-form GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))


def gelu_grad(x: Matrix) -> Matrix:
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------

def finite_difference_gradient(
    loss_fn: Callable[[Vector], float],
    params: Vector,
    eps: float = 1e-5,
) -> Vector:
    """Central differences, one coordinate at a time."""
    base = np.array(params, dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    for k in range(base.size):
        original = base[k]
        base[k] = original + eps
        plus = float(loss_fn(base.copy()))
        base[k] = original - eps
        minus = float(loss_fn(base.copy()))
        base[k] = original
        grad[k] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic: Vector, numeric: Vector, floor: float = 1e-8) -> Vector:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV_2_53 = 1.0 / float(1 << 53)


class RngStream:
    """
    splitmix64 integer stream with Box–Muller normals.

    The stream is counter based: the k-th integer (k >= 1) is
    mix(seed + k * golden), so ``(seed, position)`` fully determines what
    comes next. Box–Muller produces normals in pairs; an odd request keeps
    the second value of the last pair and hands it out first next time.
    """

    def __init__(self, seed: int, position: int = 0):
        self.seed = int(seed) & _MASK64
        self.position = int(position)
        self._spare: float | None = None

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, position={self.position})"

    def next_u64(self, n: int) -> npt.NDArray[np.uint64]:
        counters = np.arange(self.position + 1, self.position + n + 1, dtype=np.uint64)
        self.position += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + counters * _GOLDEN
            z = (z ^ (z >> _S30)) * _MIX1
            z = (z ^ (z >> _S27)) * _MIX2
        return z ^ (z >> _S31)

    def uniform(self, shape: int | tuple[int, ...]) -> npt.NDArray[np.float64]:
        count = int(np.prod(shape))
        bits = self.next_u64(count) >> _S11
        return (bits.astype(np.float64) * _INV_2_53).reshape(shape)

    def normal(self, shape: int | tuple[int, ...]) -> npt.NDArray[np.float64]:
        count = int(np.prod(shape))
        out = np.empty(count, dtype=np.float64)
        filled = 0
        if count and self._spare is not None:
            out[0] = self._spare
            self._spare = None
            filled = 1
        remaining = count - filled
        if remaining:
            pairs = (remaining + 1) // 2
            u = self.uniform(2 * pairs).reshape(pairs, 2)
            radius = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
            theta = 2.0 * math.pi * u[:, 1]
            z = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1).ravel()
            if remaining % 2:
                self._spare = float(z[-1])
                z = z[:-1]
            out[filled:] = z
        return out.reshape(shape)

    def permutation(self, n: int) -> npt.NDArray[np.int64]:
        return np.argsort(self.uniform(n), kind="stable").astype(np.int64)
