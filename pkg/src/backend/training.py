"""
Training loop shared by the baseline, LiT and three-tower modes.

Adam with decoupled weight decay, linear warmup then cosine decay, global
norm clipping and seeded drop-last batching.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterator

import numpy as np

from src.backend.config import ADAM_EPS, BATCH_STREAM_SALT, LOSS_TRACE_HEADER
from src.backend.errors import (
    ConfigError,
    EmptyDataset,
    NotNormalized,
    NumericalFailure,
    ShapeMismatch,
    StepOutOfRange,
)
from src.backend.model.losses import LossBreakdown, LossVariant
from src.backend.model.towers import Model
from src.backend.numerics import RngStream, Vector

if TYPE_CHECKING:
    from src.backend.data.dataset import SyntheticDataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 64
    clip_norm: float = 1.0
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    seed: int = 0
    variant: LossVariant = field(default_factory=LossVariant)
    log_every: int = 200

    def __post_init__(self) -> None:
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps!r}")
        # A zero-step run is a no-op and needs no schedule.
        if self.total_steps > 0 and not 0 < self.warmup_steps <= self.total_steps:
            raise ConfigError(
                f"warmup_steps must be in (0, total_steps={self.total_steps}], got {self.warmup_steps!r}"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size!r}")
        if not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be > 0, got {self.clip_norm!r}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay!r}")
        if not self.peak_lr >= 0:
            raise ConfigError(f"peak_lr must be >= 0, got {self.peak_lr!r}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0 <= value < 1:
                raise ConfigError(f"{name} must be in [0, 1), got {value!r}")
        if self.log_every < 1:
            raise ConfigError(f"log_every must be >= 1, got {self.log_every!r}")

    def as_dict(self) -> dict:
        return {
            "peak_lr": self.peak_lr,
            "warmup_steps": self.warmup_steps,
            "total_steps": self.total_steps,
            "batch_size": self.batch_size,
            "clip_norm": self.clip_norm,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "seed": self.seed,
            "log_every": self.log_every,
            **self.variant.as_dict(),
        }


# ---------------------------------------------------------------------------
# Loss trace
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceRecord:
    step: int
    l_fg: float
    l_fh: float
    l_gh: float
    total: float
    tau: float
    lr: float

    def as_row(self) -> tuple:
        return tuple(getattr(self, name) for name in LOSS_TRACE_HEADER)


@dataclass
class LossTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def append(self, record: TraceRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ConfigError(
                f"trace steps must increase strictly, got {record.step} after {self.records[-1].step}"
            )
        self.records.append(record)

    def record(self, step: int, breakdown: LossBreakdown, tau: float, lr: float) -> None:
        self.append(TraceRecord(step, breakdown.l_fg, breakdown.l_fh, breakdown.l_gh, breakdown.total, tau, lr))

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def at_step(self, step: int) -> TraceRecord:
        for record in self.records:
            if record.step == step:
                return record
        raise StepOutOfRange(f"no trace record for step {step}")

    def __len__(self) -> int:
        return len(self.records)


# ---------------------------------------------------------------------------
# Schedule, clipping, Adam
# ---------------------------------------------------------------------------

def lr_at_step(config: TrainConfig, step: int) -> float:
    if not 0 <= step <= config.total_steps:
        raise StepOutOfRange(f"step must be in [0, {config.total_steps}], got {step!r}")
    warmup = config.warmup_steps
    if step == 0:
        return 0.0
    if step < warmup or config.total_steps == warmup:
        return config.peak_lr * step / warmup
    progress = (step - warmup) / (config.total_steps - warmup)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(grads: Vector, max_norm: float) -> Vector:
    if not max_norm > 0:
        raise ConfigError(f"max_norm must be > 0, got {max_norm!r}")
    norm = float(np.linalg.norm(grads))
    if norm <= max_norm:
        return grads
    return grads * (max_norm / norm)


@dataclass
class AdamState:
    m: Vector
    v: Vector
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(
    state: AdamState,
    params: Vector,
    grads: Vector,
    lr: float,
    config: TrainConfig,
    decay_mask: np.ndarray | None = None,
) -> tuple[Vector, AdamState]:
    """
    One Adam update with bias correction and decoupled weight decay
    ``p <- p - lr * wd * p`` on entries where ``decay_mask`` is True.
    """
    if not (state.m.shape == state.v.shape == grads.shape == params.shape):
        raise ShapeMismatch(
            f"adam shapes differ: m={state.m.shape}, v={state.v.shape}, grads={grads.shape}, params={params.shape}"
        )
    t = state.step + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * grads
    v = config.beta2 * state.v + (1.0 - config.beta2) * grads * grads
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    update = lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    decay = lr * config.weight_decay * params
    if decay_mask is not None:
        decay = np.where(decay_mask, decay, 0.0)
    return params - update - decay, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# Batching and loop
# ---------------------------------------------------------------------------

def iterate_batches(ids: np.ndarray, batch_size: int, rng: RngStream) -> Iterator[np.ndarray]:
    """Endless stream of batches: a fresh permutation per epoch, short tail dropped."""
    ids = np.asarray(ids, dtype=np.int64)
    if batch_size > ids.size:
        raise ConfigError(f"batch_size {batch_size} exceeds the {ids.size} available examples")
    per_epoch = ids.size // batch_size
    while True:
        order = ids[rng.permutation(ids.size)]
        for k in range(per_epoch):
            yield order[k * batch_size:(k + 1) * batch_size]


def train(model: Model, dataset: "SyntheticDataset", config: TrainConfig) -> tuple[Model, LossTrace]:
    """
    Train a copy of ``model`` on the dataset's train split.

    Step t = 1..total_steps uses lr_at_step(t); trace record t holds the loss
    evaluated before update t.
    """
    if model.variant != config.variant:
        raise ConfigError(f"model loss variant {model.variant} differs from training variant {config.variant}")
    train_ids = dataset.split_ids("train")
    if train_ids.size == 0:
        raise EmptyDataset("the dataset has no training examples")

    trained = model.copy()
    trace = LossTrace()
    if config.total_steps == 0:
        return trained, trace

    batches = iterate_batches(train_ids, config.batch_size, RngStream(config.seed ^ BATCH_STREAM_SALT))
    params = trained.flat_parameters()
    mask = trained.decay_mask()
    state = AdamState.zeros(params.size)
    logger.info(
        "Training %s for %d steps (batch %d, %d trainable parameters)",
        model.mode.mode,
        config.total_steps,
        config.batch_size,
        params.size,
    )

    for step in range(1, config.total_steps + 1):
        batch = dataset.batch(next(batches))
        try:
            breakdown, grads = trained.loss_and_grads(batch)
        except NotNormalized as exc:
            # Normalised rows only fail the unit-norm check once values go non-finite.
            raise NumericalFailure(f"non-finite embeddings at step {step}: {exc}") from exc
        if not math.isfinite(breakdown.total):
            raise NumericalFailure(f"non-finite loss {breakdown.total!r} at step {step}")
        flat = clip_global_norm(trained.flatten_gradients(grads), config.clip_norm)
        lr = lr_at_step(config, step)
        trace.record(step, breakdown, trained.main_tau, lr)
        params, state = adam_step(state, params, flat, lr, config, mask)
        trained.load_flat_parameters(params)
        if step % config.log_every == 0 or step == config.total_steps:
            logger.info(
                "step %d/%d total=%.4f l_fg=%.4f l_fh=%.4f l_gh=%.4f tau=%.4f",
                step,
                config.total_steps,
                breakdown.total,
                breakdown.l_fg,
                breakdown.l_fh,
                breakdown.l_gh,
                trained.main_tau,
            )
    return trained, trace
