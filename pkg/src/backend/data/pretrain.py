"""
pretrain.py

The simulated pretrained classifier whose penultimate layer becomes the
frozen third-tower table.

The classifier observes its modality through a fixed sensor that recovers
only the first m latent coordinates, and its labels are nearest-prototype
classes over those m coordinates. With m < k the table therefore carries no
information about the hidden coordinates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from src.backend.data.dataset import SyntheticDataset
from src.backend.data.matrix_io import read_entry, write_entry
from src.backend.errors import ArtifactError, NumericalFailure, SpecInvalid
from src.backend.model.towers import Layer, MlpEncoder
from src.backend.numerics import Matrix, RngStream, log_softmax_rows
from src.backend.training import AdamState, TrainConfig, adam_step, clip_global_norm, iterate_batches, lr_at_step
from src.backend.utility.checkpoint import read_encoder, write_encoder
from src.backend.utility.manifest import RunManifest, utc_now

logger = logging.getLogger(__name__)

TABLE_NAME = "pretrained"


@dataclass
class PretrainedArtifact:
    table: Matrix
    body: MlpEncoder
    modality: str
    visible_dims: int
    steps: int
    train_accuracy: float

    @property
    def width(self) -> int:
        return self.table.shape[1]


def latent_sensor(mixing: Matrix, visible_dims: int) -> Matrix:
    """Columns that map features back onto the first ``visible_dims`` latents."""
    return np.linalg.pinv(mixing)[:visible_dims].T


def visible_labels(dataset: SyntheticDataset, visible_dims: int) -> np.ndarray:
    C = dataset.spec.num_classes
    scores = dataset.latent[:, :visible_dims] @ dataset.prototypes[:C, :visible_dims].T
    return np.argmax(scores, axis=1).astype(np.int64)


def _cross_entropy(logits: Matrix, targets: np.ndarray) -> tuple[float, Matrix]:
    log_probs = log_softmax_rows(logits, 1.0)
    n = targets.size
    rows = np.arange(n)
    loss = float(-np.sum(log_probs[rows, targets]) / n)
    d_logits = np.exp(log_probs)
    d_logits[rows, targets] -= 1.0
    return loss, d_logits / n


def pretrain_classifier(
    dataset: SyntheticDataset,
    visible_dims: int | None = None,
    steps: int = 2000,
    *,
    modality: str = "image",
    embed_dim: int = 16,
    hidden: int = 64,
    batch_size: int = 256,
    lr: float = 3e-3,
    seed: int = 0,
) -> PretrainedArtifact:
    k = dataset.spec.latent_dim
    m = dataset.spec.visible_dims if visible_dims is None else int(visible_dims)
    if not 1 <= m <= k:
        raise SpecInvalid(f"visible_dims must be in [1, {k}], got {m!r}")
    if steps < 0:
        raise SpecInvalid(f"steps must be >= 0, got {steps!r}")

    sensor = latent_sensor(dataset.mixing(modality), m)
    inputs = dataset.features(modality) @ sensor
    targets = visible_labels(dataset, m)
    train_ids = dataset.split_ids("train")

    rng = RngStream(seed)
    body_dims = (m, hidden, embed_dim) if hidden > 0 else (m, embed_dim)
    body = MlpEncoder.initialize(body_dims, rng)
    head = MlpEncoder.initialize((embed_dim, dataset.spec.num_classes), rng)
    named = body.named_parameters("body") + head.named_parameters("head")

    if steps > 0:
        config = TrainConfig(
            peak_lr=lr,
            warmup_steps=max(1, steps // 20),
            total_steps=steps,
            batch_size=min(batch_size, train_ids.size),
            clip_norm=1.0,
            weight_decay=0.0,
            seed=seed,
        )
        params = np.concatenate([p.ravel() for _, p in named])
        state = AdamState.zeros(params.size)
        batches = iterate_batches(train_ids, config.batch_size, RngStream(seed, position=1 << 32))
        for step in range(1, steps + 1):
            ids = next(batches)
            prelogits, body_cache = body.forward(inputs[ids])
            logits, head_cache = head.forward(prelogits)
            loss, d_logits = _cross_entropy(logits, targets[ids])
            if not math.isfinite(loss):
                raise NumericalFailure(f"non-finite classifier loss at step {step}")
            head_grads, d_prelogits = head.backward(head_cache, d_logits)
            body_grads, _ = body.backward(body_cache, d_prelogits)
            grads = MlpEncoder.named_gradients("body", body_grads) | MlpEncoder.named_gradients("head", head_grads)
            flat = clip_global_norm(np.concatenate([grads[name].ravel() for name, _ in named]), config.clip_norm)
            params, state = adam_step(state, params, flat, lr_at_step(config, step), config)
            offset = 0
            for _, tensor in named:
                tensor[...] = params[offset:offset + tensor.size].reshape(tensor.shape)
                offset += tensor.size
            if step % 500 == 0 or step == steps:
                logger.info("pretrain step %d/%d loss=%.4f", step, steps, loss)

    train_predictions = np.argmax(head(body(inputs[train_ids])), axis=1)
    train_accuracy = float(np.mean(train_predictions == targets[train_ids]))

    # Fold the sensor into the first layer so the body reads raw features.
    first = body.layers[0]
    folded = MlpEncoder(
        [Layer(sensor @ first.weight, None if first.bias is None else first.bias.copy())]
        + [layer.copy() for layer in body.layers[1:]]
    )
    table = folded(dataset.features(modality))
    logger.info(
        "Pretrained %s classifier on %d of %d latent dims (train accuracy %.3f)",
        modality,
        m,
        k,
        train_accuracy,
    )
    return PretrainedArtifact(
        table=table,
        body=folded,
        modality=modality,
        visible_dims=m,
        steps=steps,
        train_accuracy=train_accuracy,
    )


# ---------------------------------------------------------------------------
# Directory I/O
# ---------------------------------------------------------------------------

def write_pretrained_dir(
    artifact: PretrainedArtifact,
    directory: str | Path,
    *,
    config: dict[str, Any],
    seed: int,
    started_at: str | None = None,
) -> RunManifest:
    target = Path(directory)
    entries = [write_entry(target, TABLE_NAME, artifact.table)]
    entries += write_encoder(target, "body", artifact.body)
    manifest = RunManifest(
        command="pretrain",
        config=config,
        seed=seed,
        started_at=started_at,
        finished_at=utc_now(),
        artifacts=entries,
        extra={
            "modality": artifact.modality,
            "visible_dims": artifact.visible_dims,
            "steps": artifact.steps,
            "train_accuracy": artifact.train_accuracy,
        },
    )
    manifest.write(target)
    return manifest


def load_pretrained_dir(directory: str | Path) -> PretrainedArtifact:
    source = Path(directory)
    if not source.is_dir():
        raise ArtifactError(f"pretrained directory not found: {source}")
    manifest = RunManifest.read(source, expect="pretrain")
    entries = {entry.name: entry for entry in manifest.artifacts}
    body = read_encoder(source, entries, "body")
    if body is None:
        raise ArtifactError(f"{source}: manifest lists no classifier body")
    try:
        return PretrainedArtifact(
            table=read_entry(source, manifest.entry(TABLE_NAME)),
            body=body,
            modality=str(manifest.extra["modality"]),
            visible_dims=int(manifest.extra["visible_dims"]),
            steps=int(manifest.extra["steps"]),
            train_accuracy=float(manifest.extra["train_accuracy"]),
        )
    except KeyError as exc:
        raise ArtifactError(f"{source}: manifest is missing {exc}") from None
