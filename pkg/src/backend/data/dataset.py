"""
dataset.py

Synthetic paired-modality data. Each pair shares a latent u ~ N(0, I_k):

    image = W_I u + sigma * eps_I
    text  = W_T u + sigma * eps_T

and its class is the nearest seeded prototype. Extra prototypes beyond the C
in-distribution classes mark out-of-distribution pairs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np

from src.backend.config import DEFAULT_SYNTHETIC
from src.backend.data.matrix_io import read_entry, write_entry
from src.backend.errors import ArtifactError, ConfigError, SpecInvalid
from src.backend.model.towers import Batch
from src.backend.numerics import Matrix, RngStream, l2_normalize_rows
from src.backend.utility.manifest import RunManifest

logger = logging.getLogger(__name__)

SPLITS = ("train", "eval", "ood")
LABELS_NAME = "labels.csv"
LABELS_HEADER = ("id", "y", "split")
DATASET_TENSORS = (
    "image",
    "text",
    "latent",
    "mixing_image",
    "mixing_text",
    "prototypes",
    "class_text",
)


@dataclass(frozen=True)
class SyntheticSpec:
    latent_dim: int = DEFAULT_SYNTHETIC["latent_dim"]
    img_dim: int = DEFAULT_SYNTHETIC["img_dim"]
    txt_dim: int = DEFAULT_SYNTHETIC["txt_dim"]
    num_classes: int = DEFAULT_SYNTHETIC["num_classes"]
    num_pairs: int = DEFAULT_SYNTHETIC["num_pairs"]
    noise_sigma: float = DEFAULT_SYNTHETIC["noise_sigma"]
    visible_dims: int = DEFAULT_SYNTHETIC["visible_dims"]
    ood_classes: int = DEFAULT_SYNTHETIC["ood_classes"]
    eval_fraction: float = DEFAULT_SYNTHETIC["eval_fraction"]
    seed: int = DEFAULT_SYNTHETIC["seed"]

    def __post_init__(self) -> None:
        for name in ("latent_dim", "img_dim", "txt_dim", "num_pairs"):
            if getattr(self, name) < 1:
                raise SpecInvalid(f"{name} must be >= 1, got {getattr(self, name)!r}")
        if self.num_classes < 2:
            raise SpecInvalid(f"num_classes must be >= 2, got {self.num_classes!r}")
        if self.num_pairs < self.num_classes:
            raise SpecInvalid(f"num_pairs must be >= num_classes ({self.num_classes}), got {self.num_pairs!r}")
        if not 1 <= self.visible_dims <= self.latent_dim:
            raise SpecInvalid(f"visible_dims must be in [1, {self.latent_dim}], got {self.visible_dims!r}")
        if not self.noise_sigma >= 0:
            raise SpecInvalid(f"noise_sigma must be >= 0, got {self.noise_sigma!r}")
        if self.ood_classes < 0:
            raise SpecInvalid(f"ood_classes must be >= 0, got {self.ood_classes!r}")
        if not 0 < self.eval_fraction < 1:
            raise SpecInvalid(f"eval_fraction must be in (0, 1), got {self.eval_fraction!r}")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            logger.warning("Ignoring unknown dataset settings: %s", ", ".join(unknown))
        try:
            return cls(**{key: value for key, value in data.items() if key in known})
        except TypeError as exc:
            raise SpecInvalid(f"invalid dataset settings: {exc}") from None

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    image: Matrix
    text: Matrix
    latent: Matrix
    labels: np.ndarray
    split: np.ndarray
    mixing_image: Matrix
    mixing_text: Matrix
    prototypes: Matrix
    class_text: Matrix

    @property
    def num_pairs(self) -> int:
        return self.image.shape[0]

    @property
    def ids(self) -> np.ndarray:
        return np.arange(self.num_pairs, dtype=np.int64)

    def split_ids(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {name!r}")
        return np.flatnonzero(self.split == name).astype(np.int64)

    def batch(self, ids) -> Batch:
        ids = np.asarray(ids, dtype=np.int64)
        return Batch(ids, self.image[ids], self.text[ids])

    def mixing(self, modality: str) -> Matrix:
        if modality == "image":
            return self.mixing_image
        if modality == "text":
            return self.mixing_text
        raise ConfigError(f"modality must be 'image' or 'text', got {modality!r}")

    def features(self, modality: str) -> Matrix:
        return self.image if modality == "image" else self.text


def generate_dataset(spec: SyntheticSpec) -> SyntheticDataset:
    """
    Pure function of ``spec``. Draw order: W_I, W_T, prototypes, latents,
    image noise, text noise, split permutation.
    """
    rng = RngStream(spec.seed)
    k = spec.latent_dim
    n = spec.num_pairs
    num_prototypes = spec.num_classes + spec.ood_classes

    mixing_image = rng.normal((spec.img_dim, k)) / math.sqrt(k)
    mixing_text = rng.normal((spec.txt_dim, k)) / math.sqrt(k)
    prototypes = l2_normalize_rows(rng.normal((num_prototypes, k)))
    latent = rng.normal((n, k))
    noise_image = rng.normal((n, spec.img_dim))
    noise_text = rng.normal((n, spec.txt_dim))

    image = latent @ mixing_image.T + spec.noise_sigma * noise_image
    text = latent @ mixing_text.T + spec.noise_sigma * noise_text
    labels = np.argmax(latent @ prototypes.T, axis=1).astype(np.int64)

    in_ids = np.flatnonzero(labels < spec.num_classes)
    if in_ids.size < 2:
        raise SpecInvalid(f"only {in_ids.size} in-distribution pairs were drawn; increase num_pairs")
    order = in_ids[rng.permutation(in_ids.size)]
    n_eval = min(max(int(round(in_ids.size * spec.eval_fraction)), 1), in_ids.size - 1)
    split = np.full(n, "ood", dtype="<U5")
    split[order[: in_ids.size - n_eval]] = "train"
    split[order[in_ids.size - n_eval:]] = "eval"

    # Canonical class text: the noiseless text of a pair sitting on the prototype.
    class_text = (math.sqrt(k) * prototypes[: spec.num_classes]) @ mixing_text.T

    logger.info(
        "Generated %d pairs (train=%d, eval=%d, ood=%d)",
        n,
        int(np.sum(split == "train")),
        int(np.sum(split == "eval")),
        int(np.sum(split == "ood")),
    )
    return SyntheticDataset(
        spec=spec,
        image=image,
        text=text,
        latent=latent,
        labels=labels,
        split=split,
        mixing_image=mixing_image,
        mixing_text=mixing_text,
        prototypes=prototypes,
        class_text=class_text,
    )


# ---------------------------------------------------------------------------
# Directory I/O
# ---------------------------------------------------------------------------

def _labels_csv(dataset: SyntheticDataset) -> bytes:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(LABELS_HEADER)
    for idx in range(dataset.num_pairs):
        writer.writerow((idx, int(dataset.labels[idx]), dataset.split[idx]))
    return buffer.getvalue().encode("utf-8")


def write_dataset_dir(dataset: SyntheticDataset, directory: str | Path) -> RunManifest:
    """Write tensors, labels.csv and a timestamp-free manifest."""
    target = Path(directory)
    entries = [write_entry(target, name, getattr(dataset, name)) for name in DATASET_TENSORS]
    payload = _labels_csv(dataset)
    try:
        (target / LABELS_NAME).write_bytes(payload)
    except OSError as exc:
        raise ArtifactError(f"could not write {target / LABELS_NAME}: {exc}") from exc
    manifest = RunManifest(
        command="gen-data",
        config=dataset.spec.as_dict(),
        seed=dataset.spec.seed,
        artifacts=entries,
        files={LABELS_NAME: hashlib.sha256(payload).hexdigest()},
    )
    manifest.write(target)
    return manifest


def _read_labels(path: Path, expected_sha: str | None) -> tuple[np.ndarray, np.ndarray]:
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise ArtifactError(f"could not read {path}: {exc}") from exc
    if expected_sha is not None and hashlib.sha256(payload).hexdigest() != expected_sha:
        raise ArtifactError(f"{path}: sha256 does not match the manifest")
    rows = list(csv.reader(io.StringIO(payload.decode("utf-8"))))
    if not rows or tuple(rows[0]) != LABELS_HEADER:
        raise ArtifactError(f"{path}: expected header {','.join(LABELS_HEADER)}")
    body = rows[1:]
    labels = np.array([int(row[1]) for row in body], dtype=np.int64)
    split = np.array([row[2] for row in body], dtype="<U5")
    return labels, split


def load_dataset_dir(directory: str | Path) -> SyntheticDataset:
    source = Path(directory)
    if not source.is_dir():
        raise ArtifactError(f"dataset directory not found: {source}")
    manifest = RunManifest.read(source, expect="gen-data")
    spec = SyntheticSpec.from_dict(manifest.config)
    tensors = {name: read_entry(source, manifest.entry(name)) for name in DATASET_TENSORS}
    labels, split = _read_labels(source / LABELS_NAME, manifest.files.get(LABELS_NAME))
    if labels.size != tensors["image"].shape[0]:
        raise ArtifactError(f"{LABELS_NAME} lists {labels.size} pairs, image.3tmx holds {tensors['image'].shape[0]}")
    logger.debug("Loaded dataset %s (%d pairs)", source, labels.size)
    return SyntheticDataset(spec=spec, labels=labels, split=split, **tensors)
