"""
data_path.py

Central place to decide where run directories live when ``--out`` is omitted.

Priority:
  1. TRITOWER_HOME (explicit override, useful for tests and sweeps)
  2. per-user directory in production
  3. ./runs under the working directory in development
"""

from __future__ import annotations

import os
from pathlib import Path

from src.backend.config import APP_NAME, HOME_ENV, get_app_env, is_frozen_exe, load_env

RUNS_DIRNAME = "runs"


# ---------------------------------------------------------------------------
# Path builders
# ---------------------------------------------------------------------------

def get_explicit_runs_root() -> Path | None:
    load_env()
    explicit = os.getenv(HOME_ENV)
    if explicit:
        return Path(explicit).expanduser().resolve()
    return None


def get_dev_runs_root() -> Path:
    return Path.cwd() / RUNS_DIRNAME


def get_prod_runs_root() -> Path:
    """
    %LOCALAPPDATA%\\TriTower\\runs on Windows, ~/.tritower/runs elsewhere.
    """
    local_appdata = os.getenv("LOCALAPPDATA")
    if os.name == "nt" and local_appdata:
        return Path(local_appdata) / APP_NAME / RUNS_DIRNAME
    return Path.home() / f".{APP_NAME.lower()}" / RUNS_DIRNAME


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------

def get_runs_root() -> Path:
    explicit = get_explicit_runs_root()
    if explicit is not None:
        return explicit
    if get_app_env() == "production":
        return get_prod_runs_root()
    return get_dev_runs_root()


def default_run_dir(command: str, label: str, seed: int) -> Path:
    """``<runs root>/<command>-<label>-seed<seed>``."""
    return get_runs_root() / f"{command}-{label}-seed{seed}"


def default_pretrained_dir(data_dir: str | Path) -> Path:
    return Path(data_dir) / "pretrained"


def describe_runs_root() -> str:
    lines = [
        f"APP_ENV      : {get_app_env()!r}",
        f"Frozen exe   : {is_frozen_exe()}",
        f"{HOME_ENV:<13}: {os.getenv(HOME_ENV)!r}",
        f"Resolved root: {get_runs_root()}",
    ]
    return "\n".join(lines)
