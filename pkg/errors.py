"""
Exception hierarchy for PruneLab.

Engine, pruner, schedule, metrics and snapshot-store code raise these
instead of returning sentinel values; the harness catches them per cell.
"""

from typing import Optional


class PruningLabError(Exception):
    """Base class for every error raised by PruneLab."""


class ConfigurationError(PruningLabError):
    """Invalid architecture, experiment config or pruning plan."""


class ShapeError(PruningLabError):
    """Batch or layer shapes do not line up."""


class NumericalError(PruningLabError):
    """Non-finite values reached the engine."""


class ScheduleError(PruningLabError):
    """Learning-rate schedule misuse (negative epoch, bad slice, gaps)."""


class MaskError(PruningLabError):
    """Mask does not fit the network or cannot be pruned further."""


class SnapshotError(PruningLabError):
    """Snapshot missing, duplicated or unreadable."""


class ChecksumError(SnapshotError):
    """Snapshot file failed CRC-32C verification."""


class FormatError(PruningLabError):
    """Bad magic bytes, version or truncated payload in a PRW* file."""


class DatasetError(PruningLabError):
    """Malformed dataset file; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
