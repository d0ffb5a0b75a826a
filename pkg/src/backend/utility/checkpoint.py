"""
checkpoint.py

Self-contained model checkpoints: ``checkpoint.json`` describing the model
plus one ``.3tmx`` file per tensor (frozen table and body included).
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Iterable

import numpy as np

from src.backend.config import CHECKPOINT_NAME
from src.backend.data.matrix_io import ManifestEntry, read_entry, write_entry
from src.backend.errors import ArtifactError
from src.backend.model.losses import LossVariant, Temperature, TransferKind
from src.backend.model.towers import FrozenTower, HeadConfig, Layer, MlpEncoder, Model, ModelMode

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
TEMPERATURE_PARAMETERIZATION = "tau = exp(-log_inv_tau)"


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

def write_encoder(directory: str | Path, prefix: str, encoder: MlpEncoder) -> list[ManifestEntry]:
    entries = []
    for idx, layer in enumerate(encoder.layers):
        entries.append(write_entry(directory, f"{prefix}.{idx}.weight", layer.weight))
        if layer.bias is not None:
            entries.append(write_entry(directory, f"{prefix}.{idx}.bias", layer.bias.reshape(1, -1)))
    return entries


def read_encoder(directory: str | Path, entries: dict[str, ManifestEntry], prefix: str) -> MlpEncoder | None:
    """Rebuild ``prefix.0.weight``, ``prefix.0.bias``, ... or None when absent."""
    layers = []
    idx = 0
    while f"{prefix}.{idx}.weight" in entries:
        weight = read_entry(directory, entries[f"{prefix}.{idx}.weight"])
        bias_name = f"{prefix}.{idx}.bias"
        bias = read_entry(directory, entries[bias_name]).reshape(-1) if bias_name in entries else None
        layers.append(Layer(weight, bias))
        idx += 1
    return MlpEncoder(layers) if layers else None


def _index(entries: Iterable[ManifestEntry]) -> dict[str, ManifestEntry]:
    return {entry.name: entry for entry in entries}


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, directory: str | Path) -> Path:
    target = Path(directory)
    entries: list[ManifestEntry] = []
    if model.image_encoder is not None:
        entries += write_encoder(target, "image", model.image_encoder)
    if model.text_encoder is not None:
        entries += write_encoder(target, "text", model.text_encoder)
    if model.frozen is not None:
        entries += write_encoder(target, "third", model.frozen.projection)
        entries.append(write_entry(target, "frozen.table", model.frozen.table))
        if model.frozen.body is not None:
            entries += write_encoder(target, "frozen.body", model.frozen.body)
    for name in model.heads.learned_names:
        entries.append(write_entry(target, f"head.{name}", model.heads.maps[name]))
    for key in model.variant.temperature_keys:
        entries.append(write_entry(target, f"temp.{key}", model.temperatures[key].log_inv_tau.reshape(1, 1)))

    embed_dim = model.frozen.output_dim if model.frozen is not None else model.image_encoder.output_dim
    document = {
        "format": CHECKPOINT_FORMAT,
        "mode": model.mode.as_dict(),
        "head_variant": model.heads.variant,
        "third_tower": None if model.frozen is None else model.frozen.kind,
        "frozen_tower_modality": None if model.frozen is None else model.frozen.modality,
        "dims": {
            "embed_dim": embed_dim,
            "image_dim": None if model.image_encoder is None else model.image_encoder.input_dim,
            "text_dim": None if model.text_encoder is None else model.text_encoder.input_dim,
            "table_width": None if model.frozen is None else model.frozen.table.shape[1],
        },
        "temperature": {
            "parameterization": TEMPERATURE_PARAMETERIZATION,
            "tau": {key: model.temperatures[key].tau for key in model.variant.temperature_keys},
        },
        "loss_variant": model.variant.as_dict(),
        "tensors": [entry.as_dict() for entry in entries],
    }
    path = target / CHECKPOINT_NAME
    try:
        target.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ArtifactError(f"could not write {path}: {exc}") from exc
    logger.info("Saved %s checkpoint with %d tensors to %s", model.mode.mode, len(entries), target)
    return path


def load_checkpoint(directory: str | Path) -> Model:
    source = Path(directory)
    path = source / CHECKPOINT_NAME
    if not path.is_file():
        raise ArtifactError(f"no {CHECKPOINT_NAME} in {source}")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"could not read {path}: {exc}") from exc
    if document.get("format") != CHECKPOINT_FORMAT:
        raise ArtifactError(f"{path}: unsupported checkpoint format {document.get('format')!r}")

    try:
        entries = _index(ManifestEntry.from_dict(item) for item in document["tensors"])
        mode = ModelMode(**document["mode"])
        loss = document["loss_variant"]
        variant = LossVariant(
            temps=loss["temps"],
            transfer=TransferKind(loss["transfer"], float(loss["loss_weight"])),
            drop_term=loss["drop_term"],
        )
        head_variant = document["head_variant"]
        projection_kind = document["third_tower"]
        frozen_modality = document["frozen_tower_modality"]
    except (KeyError, TypeError) as exc:
        raise ArtifactError(f"{path}: malformed checkpoint ({exc})") from None

    frozen = None
    if "frozen.table" in entries:
        frozen = FrozenTower(
            table=read_entry(source, entries["frozen.table"]),
            projection=read_encoder(source, entries, "third"),
            body=read_encoder(source, entries, "frozen.body"),
            modality=frozen_modality,
            kind=projection_kind,
        )
    heads = HeadConfig(
        head_variant,
        {name[len("head."):]: read_entry(source, entry) for name, entry in entries.items() if name.startswith("head.")},
    )
    temperatures = {
        key: Temperature(read_entry(source, entries[f"temp.{key}"]).reshape(1))
        for key in variant.temperature_keys
    }
    model = Model(
        mode=mode,
        image_encoder=read_encoder(source, entries, "image"),
        text_encoder=read_encoder(source, entries, "text"),
        frozen=frozen,
        heads=heads,
        temperatures=temperatures,
        variant=variant,
    )
    logger.debug("Loaded %s checkpoint from %s", mode.mode, source)
    return model


def same_parameters(a: Model, b: Model) -> bool:
    """True when both models hold bit-identical trainable tensors."""
    pa, pb = a.named_parameters(), b.named_parameters()
    if [name for name, _ in pa] != [name for name, _ in pb]:
        return False
    return all(np.array_equal(x, y) for (_, x), (_, y) in zip(pa, pb))
