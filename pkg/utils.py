"""
Utility helpers for PruneLab.

Resolves the snapshot and output directories and prints console progress.
"""

import os
from pathlib import Path
from typing import Optional

SNAPSHOT_DIR_ENV = "PRWD_SNAPSHOT_DIR"


def get_snapshot_dir(output_dir: str, override: Optional[str] = None) -> Path:
    """Return the directory that holds snapshot files and ``registry.db``.

    The ``PRWD_SNAPSHOT_DIR`` environment variable wins over everything;
    otherwise an explicit override, otherwise ``<output_dir>/snapshots``.

    Args:
        output_dir: Experiment output directory from the config.
        override: Optional directory passed by the caller.

    Returns:
        The absolute snapshot directory (created if missing).
    """
    env_dir = os.environ.get(SNAPSHOT_DIR_ENV)
    if env_dir:
        base_path = Path(env_dir)
    elif override:
        base_path = Path(override)
    else:
        base_path = Path(output_dir) / "snapshots"

    base_path = base_path.resolve()
    base_path.mkdir(parents=True, exist_ok=True)
    return base_path


def get_registry_path(snapshot_dir: Path) -> str:
    """Path of the SQLite run registry inside a snapshot directory."""
    return str(Path(snapshot_dir) / "registry.db")


def log(msg: str, level: str = "INFO") -> None:
    """Print formatted console messages."""
    symbols = {"INFO": "ℹ️ ", "SUCCESS": "✓ ", "ERROR": "✗ ", "WARN": "⚠ "}
    print(f"{symbols.get(level, '→ ')} {msg}", flush=True)
