from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, Mapping

from src.backend.config import load_config_file

logger = logging.getLogger(__name__)


def resolve_settings(
    defaults: Mapping[str, Any],
    flags: Mapping[str, Any],
    config_path: str | Path | None = None,
) -> Dict[str, Any]:
    """
    Layer defaults <- ``--config`` JSON <- explicit flags.

    Flags left at ``None`` were not given on the command line and do not
    override anything. Keys the command does not know are ignored.
    """
    merged = dict(defaults)
    if config_path is not None:
        overrides = load_config_file(config_path)
        unknown = sorted(key for key in overrides if key not in merged)
        if unknown:
            logger.warning("Ignoring unknown config keys: %s", ", ".join(unknown))
        for key, value in overrides.items():
            if key in merged:
                merged[key] = value
    for key, value in flags.items():
        if key in merged and value is not None:
            merged[key] = value
    return merged


def flags_from(args: Any, defaults: Mapping[str, Any]) -> Dict[str, Any]:
    """The argparse values whose destinations are settings keys."""
    return {key: getattr(args, key, None) for key in defaults}
