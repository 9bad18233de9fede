"""Logging setup, output directories and deterministic JSON export."""

import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Optional, Union

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"


def configure_logging(level: Optional[str] = None) -> None:
    """Install one stream handler on the package logger.

    Args:
        level: level name; falls back to $TRAFFIC_LOG_LEVEL, then INFO
    """
    name = (level or os.getenv("TRAFFIC_LOG_LEVEL") or "INFO").upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        raise ValueError(f"unknown log level {name!r}")
    logger = logging.getLogger("traffic_forecaster")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(handler)
    logger.setLevel(numeric)
    logger.propagate = False


def ensure_output_dir(output_dir: Union[str, Path]) -> Path:
    """Create the directory if needed; fall back to the current directory when that fails."""
    output_dir = Path(output_dir)
    if not output_dir.exists():
        try:
            output_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            logger.warning(
                "Could not create directory %s: %s; using the current directory", output_dir, e
            )
            return Path.cwd()
    elif not output_dir.is_dir():
        logger.warning("%s exists but is not a directory; using the current directory", output_dir)
        return Path.cwd()
    return output_dir


def to_json(obj: Any) -> str:
    """Key-sorted, indented JSON with a trailing newline; equal inputs give equal bytes."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(obj: Any, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(to_json(obj))
    return path
