"""
Contrastive objectives for the three training modes and their ablations.

The three-tower objective averages three bidirectional contrastive terms:

    L = 1/3 * (L_{f<->g} + L_{f_h<->h_f} + L_{g_h<->h_g})

All public loss functions share one evaluation path (``_evaluate``) so that
degenerate settings (w = 1, equal per-term temperatures) reproduce the plain
objective bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, NamedTuple

import numpy as np

from src.backend.config import NORM_TOLERANCE
from src.backend.errors import ConfigError, NonSquare, NotNormalized, ShapeMismatch
from src.backend.numerics import (
    Matrix,
    Vector,
    as_matrix,
    log_softmax_rows,
    rows_are_normalized,
    similarity_matrix,
)

if TYPE_CHECKING:
    from src.backend.model.towers import Batch, Model

TRANSFER_KINDS = ("contrastive", "squared_error")
TEMPERATURE_MODES = ("shared", "per_term")
DROP_TERMS = ("none", "fg", "fh", "gh")


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass
class Temperature:
    """Learnable temperature, tau = exp(-log_inv_tau)."""

    log_inv_tau: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self) -> None:
        self.log_inv_tau = np.asarray(self.log_inv_tau, dtype=np.float64).reshape(1)

    @classmethod
    def from_tau(cls, tau: float) -> "Temperature":
        if not tau > 0:
            raise ConfigError(f"temperature must be > 0, got {tau!r}")
        return cls(np.array([-math.log(tau)]))

    @property
    def theta(self) -> float:
        return float(self.log_inv_tau[0])

    @property
    def tau(self) -> float:
        return math.exp(-self.theta)

    def copy(self) -> "Temperature":
        return Temperature(self.log_inv_tau.copy())


@dataclass(frozen=True)
class LossBreakdown:
    l_fg: float
    l_fh: float
    l_gh: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {"l_fg": self.l_fg, "l_fh": self.l_fh, "l_gh": self.l_gh, "total": self.total}


@dataclass(frozen=True)
class TransferKind:
    kind: str = "contrastive"
    weight: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in TRANSFER_KINDS:
            raise ConfigError(f"transfer kind must be one of {TRANSFER_KINDS}, got {self.kind!r}")
        if not self.weight >= 0:
            raise ConfigError(f"transfer weight must be >= 0, got {self.weight!r}")


@dataclass(frozen=True)
class LossVariant:
    temps: str = "shared"
    transfer: TransferKind = TransferKind()
    drop_term: str = "none"

    def __post_init__(self) -> None:
        if self.temps not in TEMPERATURE_MODES:
            raise ConfigError(f"temps must be one of {TEMPERATURE_MODES}, got {self.temps!r}")
        if self.drop_term not in DROP_TERMS:
            raise ConfigError(f"drop_term must be one of {DROP_TERMS}, got {self.drop_term!r}")

    @property
    def temperature_keys(self) -> tuple[str, ...]:
        return ("shared",) if self.temps == "shared" else ("fg", "fh", "gh")

    def as_dict(self) -> dict:
        return {
            "temps": self.temps,
            "transfer": self.transfer.kind,
            "loss_weight": self.transfer.weight,
            "drop_term": self.drop_term,
        }


class HeadOutputs(NamedTuple):
    """Normalised batches entering the three loss terms."""

    f: Matrix
    g: Matrix
    f_h: Matrix
    h_f: Matrix
    g_h: Matrix
    h_g: Matrix


# ---------------------------------------------------------------------------
# Contrastive terms
# ---------------------------------------------------------------------------

def _mean_negative_diagonal(log_probs: Matrix) -> float:
    n = log_probs.shape[0]
    if n == 0:
        return 0.0
    return float(-np.sum(np.diagonal(log_probs)) / n)


def directional_loss(S: Matrix, tau: float) -> float:
    S = as_matrix(S)
    if S.shape[0] != S.shape[1]:
        raise NonSquare(f"similarity matrix must be square, got {S.shape}")
    return _mean_negative_diagonal(log_softmax_rows(np.ascontiguousarray(S), tau))


def _check_pair(F: Matrix, G: Matrix) -> None:
    if F.shape != G.shape:
        raise ShapeMismatch(f"embedding batches differ in shape: {F.shape} vs {G.shape}")
    if not rows_are_normalized(F, NORM_TOLERANCE) or not rows_are_normalized(G, NORM_TOLERANCE):
        raise NotNormalized("embedding rows must have unit L2 norm")


def bidirectional_loss(F: Matrix, G: Matrix, tau: float) -> float:
    F = as_matrix(F)
    G = as_matrix(G)
    _check_pair(F, G)
    S = similarity_matrix(F, G)
    return 0.5 * (directional_loss(S, tau) + directional_loss(S.T, tau))


def squared_transfer_loss(A: Matrix, B: Matrix) -> float:
    """(1/N) * sum_i ||A_i - B_i||^2."""
    n = A.shape[0]
    if n == 0:
        return 0.0
    diff = A - B
    return float(np.sum(diff * diff) / n)


# ---------------------------------------------------------------------------
# Combined objective
# ---------------------------------------------------------------------------

def term_coefficients(weight: float, drop_term: str = "none") -> tuple[float, float, float]:
    """d total / d (l_fg, l_fh, l_gh)."""
    if drop_term == "none":
        return (1.0 / 3.0, weight / 3.0, weight / 3.0)
    if drop_term == "fg":
        return (0.0, weight / 2.0, weight / 2.0)
    if drop_term == "fh":
        return (0.5, 0.0, weight / 2.0)
    if drop_term == "gh":
        return (0.5, weight / 2.0, 0.0)
    raise ConfigError(f"drop_term must be one of {DROP_TERMS}, got {drop_term!r}")


def combine_terms(l_fg: float, l_fh: float, l_gh: float, weight: float = 1.0, drop_term: str = "none") -> float:
    if drop_term == "none":
        return (l_fg + weight * (l_fh + l_gh)) / 3.0
    if drop_term == "fg":
        return weight * (l_fh + l_gh) / 2.0
    if drop_term == "fh":
        return (l_fg + weight * l_gh) / 2.0
    if drop_term == "gh":
        return (l_fg + weight * l_fh) / 2.0
    raise ConfigError(f"drop_term must be one of {DROP_TERMS}, got {drop_term!r}")


def _check_outputs(outputs: HeadOutputs) -> HeadOutputs:
    outputs = HeadOutputs(*(as_matrix(m) for m in outputs))
    shape = outputs.f.shape
    for name, batch in zip(HeadOutputs._fields, outputs):
        if batch.shape != shape:
            raise ShapeMismatch(f"head output {name} has shape {batch.shape}, expected {shape}")
        if not rows_are_normalized(batch, NORM_TOLERANCE):
            raise NotNormalized(f"head output {name} rows must have unit L2 norm")
    return outputs


def _evaluate(
    outputs: HeadOutputs,
    taus: tuple[float, float, float],
    transfer: TransferKind,
    drop_term: str = "none",
) -> LossBreakdown:
    outputs = _check_outputs(outputs)
    tau_fg, tau_fh, tau_gh = taus
    l_fg = bidirectional_loss(outputs.f, outputs.g, tau_fg)
    if transfer.kind == "contrastive":
        l_fh = bidirectional_loss(outputs.f_h, outputs.h_f, tau_fh)
        l_gh = bidirectional_loss(outputs.g_h, outputs.h_g, tau_gh)
    else:
        l_fh = squared_transfer_loss(outputs.f_h, outputs.h_f)
        l_gh = squared_transfer_loss(outputs.g_h, outputs.h_g)
    total = combine_terms(l_fg, l_fh, l_gh, transfer.weight, drop_term)
    return LossBreakdown(l_fg=l_fg, l_fh=l_fh, l_gh=l_gh, total=total)


def three_tower_loss(outputs: HeadOutputs, tau: float) -> LossBreakdown:
    return _evaluate(outputs, (tau, tau, tau), TransferKind("contrastive", 1.0))


def weighted_three_tower_loss(outputs: HeadOutputs, tau: float, w: float) -> LossBreakdown:
    return _evaluate(outputs, (tau, tau, tau), TransferKind("contrastive", w))


def l2_transfer_loss(outputs: HeadOutputs, tau: float, w: float = 1.0) -> LossBreakdown:
    return _evaluate(outputs, (tau, tau, tau), TransferKind("squared_error", w))


def per_term_temperature_loss(
    outputs: HeadOutputs,
    tau_fg: float,
    tau_fh: float,
    tau_gh: float,
    w: float = 1.0,
) -> LossBreakdown:
    return _evaluate(outputs, (tau_fg, tau_fh, tau_gh), TransferKind("contrastive", w))


def variant_loss(outputs: HeadOutputs, taus: tuple[float, float, float], variant: LossVariant) -> LossBreakdown:
    """Evaluate the objective selected by ``variant``."""
    return _evaluate(outputs, taus, variant.transfer, variant.drop_term)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def contrastive_term_with_grads(A: Matrix, B: Matrix, theta: float) -> tuple[float, Matrix, Matrix, float]:
    """
    Bidirectional loss between A and B and its gradient.

    ``theta`` is log(1/tau). Returns (loss, dA, dB, dtheta).
    """
    tau = math.exp(-theta)
    _check_pair(A, B)
    S = similarity_matrix(A, B)
    log_rows = log_softmax_rows(S, tau)
    log_cols = log_softmax_rows(np.ascontiguousarray(S.T), tau)
    loss = 0.5 * (_mean_negative_diagonal(log_rows) + _mean_negative_diagonal(log_cols))

    n = S.shape[0]
    eye = np.eye(n)
    d_logits = (0.5 / n) * ((np.exp(log_rows) - eye) + (np.exp(log_cols) - eye).T)
    logits = S / tau
    d_theta = float(np.sum(d_logits * logits))
    d_S = d_logits / tau
    return loss, d_S @ B, d_S.T @ A, d_theta


def squared_term_with_grads(A: Matrix, B: Matrix) -> tuple[float, Matrix, Matrix]:
    n = A.shape[0]
    diff = A - B
    d_A = (2.0 / n) * diff
    return squared_transfer_loss(A, B), d_A, -d_A


def objective_with_grads(
    outputs: HeadOutputs,
    thetas: tuple[float, float, float],
    variant: LossVariant,
) -> tuple[LossBreakdown, HeadOutputs, tuple[float, float, float]]:
    """
    Breakdown plus gradients of ``total`` with respect to the six normalised
    batches and to the three per-term log inverse temperatures.
    """
    outputs = _check_outputs(outputs)
    c_fg, c_fh, c_gh = term_coefficients(variant.transfer.weight, variant.drop_term)

    l_fg, d_f, d_g, t_fg = contrastive_term_with_grads(outputs.f, outputs.g, thetas[0])
    if variant.transfer.kind == "contrastive":
        l_fh, d_fh, d_hf, t_fh = contrastive_term_with_grads(outputs.f_h, outputs.h_f, thetas[1])
        l_gh, d_gh, d_hg, t_gh = contrastive_term_with_grads(outputs.g_h, outputs.h_g, thetas[2])
    else:
        l_fh, d_fh, d_hf = squared_term_with_grads(outputs.f_h, outputs.h_f)
        l_gh, d_gh, d_hg = squared_term_with_grads(outputs.g_h, outputs.h_g)
        t_fh = t_gh = 0.0

    total = combine_terms(l_fg, l_fh, l_gh, variant.transfer.weight, variant.drop_term)
    breakdown = LossBreakdown(l_fg=l_fg, l_fh=l_fh, l_gh=l_gh, total=total)
    grads = HeadOutputs(
        f=c_fg * d_f,
        g=c_fg * d_g,
        f_h=c_fh * d_fh,
        h_f=c_fh * d_hf,
        g_h=c_gh * d_gh,
        h_g=c_gh * d_hg,
    )
    return breakdown, grads, (c_fg * t_fg, c_fh * t_fh, c_gh * t_gh)


def loss_and_gradients(model: "Model", params: Vector, batch: "Batch") -> tuple[LossBreakdown, Vector]:
    """
    Loss of ``model`` evaluated at the flat trainable vector ``params`` and the
    gradient with respect to that vector. Frozen components never appear in
    the vector.
    """
    candidate = model.copy()
    candidate.load_flat_parameters(params)
    breakdown, grads = candidate.loss_and_grads(batch)
    return breakdown, candidate.flatten_gradients(grads)
