# config.py
from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict

from dotenv import load_dotenv

from src.backend.errors import ArtifactError, ConfigError

logger = logging.getLogger(__name__)

APP_NAME = "TriTower"
THREADS_ENV = "TRITOWER_THREADS"
HOME_ENV = "TRITOWER_HOME"

##### NUMERIC CONSTANTS #####

TAU_INIT = 0.07
RIDGE_LAMBDA = 1e-3
ECE_BINS = 10
ADAM_EPS = 1e-8
NORM_TOLERANCE = 1e-9
PROBABILITY_TOLERANCE = 1e-9
# Batch order and model init draw from distinct streams of the same seed.
BATCH_STREAM_SALT = 0x5EED

##### FILE FORMATS #####

MATRIX_MAGIC = b"3TMX"
MATRIX_VERSION = 1
MATRIX_SUFFIX = ".3tmx"
MANIFEST_NAME = "manifest.json"
CHECKPOINT_NAME = "checkpoint.json"
LOSS_TRACE_HEADER = ("step", "l_fg", "l_fh", "l_gh", "total", "tau", "lr")
REPORT_FIELDS = (
    "recall1_img2txt",
    "recall1_txt2img",
    "zeroshot_acc",
    "fewshot_acc",
    "nll",
    "brier",
    "ece",
    "auroc",
    "aupr",
    "fpr95",
)

##### DEFAULTS #####

DEFAULT_SYNTHETIC: Dict[str, Any] = {
    "latent_dim": 8,
    "img_dim": 24,
    "txt_dim": 20,
    "num_classes": 8,
    "num_pairs": 4096,
    "noise_sigma": 0.1,
    "visible_dims": 8,
    "ood_classes": 2,
    "eval_fraction": 0.2,
    "seed": 0,
}

DEFAULT_PRETRAIN: Dict[str, Any] = {
    "visible_dims": None,  # falls back to the dataset's visible_dims
    "modality": "image",
    "embed_dim": 16,
    "hidden": 64,
    "steps": 2000,
    "batch_size": 256,
    "lr": 3e-3,
    "seed": 0,
}

DEFAULT_TRAIN: Dict[str, Any] = {
    "mode": "3t",
    "frozen_modality": "image",
    "head_variant": "default",
    "third_tower": "linear",
    "loss_weight": 1.0,
    "transfer": "contrastive",
    "temps": "per-term",
    "drop_term": "none",
    "init_main_from_pretrained": False,
    "embed_dim": 16,
    "hidden": 64,
    "peak_lr": 1e-3,
    "warmup_steps": 100,
    "steps": 2000,
    "batch_size": 64,
    "clip_norm": 1.0,
    "weight_decay": 1e-3,
    "beta1": 0.9,
    "beta2": 0.99,
    "log_every": 200,
    "seed": 0,
}

DEFAULT_EVAL: Dict[str, Any] = {
    "ood_split": "ood",
    "shots": 10,
    "probe_seeds": 3,
    "ece_bins": ECE_BINS,
}

###### Common environment helpers ######

_ENV_LOADED = False


def load_env() -> None:
    """Load a ``.env`` file from the working directory once per process."""
    global _ENV_LOADED
    if _ENV_LOADED:
        return
    load_dotenv(override=False)
    _ENV_LOADED = True


def is_frozen_exe() -> bool:
    """Detects whether we are running as a bundled executable."""
    return getattr(sys, "frozen", False)


def get_app_env() -> str:
    """
    Returns 'development' or 'production' based on APP_ENV or executable state.
    """
    load_env()
    env = os.getenv("APP_ENV", "").strip().lower()
    if env in {"prod", "production"}:
        return "production"
    if env in {"dev", "development"}:
        return "development"

    if is_frozen_exe():
        return "production"
    return "development"


def get_thread_cap() -> int:
    """
    Upper bound on internal (BLAS) parallelism.

    Read from TRITOWER_THREADS; defaults to the number of cores.
    """
    load_env()
    raw = os.getenv(THREADS_ENV, "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


def load_config_file(path: str | Path) -> Dict[str, Any]:
    """Read a ``--config`` JSON override layer."""
    cfg_file = Path(path)
    try:
        text = cfg_file.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ArtifactError(f"Config file not found: {cfg_file}") from None
    except OSError as exc:
        raise ArtifactError(f"Cannot read config file {cfg_file}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config file is not valid JSON: {cfg_file} ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"Config file must hold a JSON object, got {type(data).__name__}")
    logger.debug("Loaded config override from %s", cfg_file)
    return data
