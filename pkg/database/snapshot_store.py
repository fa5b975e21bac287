"""
Training snapshots on disk, indexed in the run registry.

A snapshot is everything needed to resume training exactly at epoch g:
weights, momentum buffer and the data-order RNG state. Files are
append-only during a run and verified with a CRC-32C trailer on load.

PRWS: b"PRWS" | u32 version | f64 epoch | u64 d | d x f32 weights
      | d x f32 velocity | 32-byte rng state | u32 CRC-32C of all prior bytes
"""

import sqlite3
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List

import crc32c
import numpy as np

from database import queries
from database.db_init import init_db
from engine.serialization import write_atomic
from errors import ChecksumError, FormatError, SnapshotError

SNAPSHOT_MAGIC = b"PRWS"
SNAPSHOT_VERSION = 1
RNG_STATE_BYTES = 32
_HEADER = struct.Struct("<4sIdQ")
_TRAILER = struct.Struct("<I")


def epoch_key(g: float) -> float:
    """Canonical float used to index epochs (fractional epochs allowed)."""
    return round(float(g), 6)


@dataclass(frozen=True, eq=False)
class Snapshot:
    epoch: float
    weights: np.ndarray
    velocity: np.ndarray
    rng_state: bytes

    @property
    def schedule_position(self) -> float:
        # training resumes at S[epoch]
        return self.epoch

    @property
    def d(self) -> int:
        return int(self.weights.size)


def encode_snapshot(snapshot: Snapshot) -> bytes:
    if len(snapshot.rng_state) != RNG_STATE_BYTES:
        raise SnapshotError(f"rng_state must be {RNG_STATE_BYTES} bytes, got {len(snapshot.rng_state)}.")
    if snapshot.velocity.size != snapshot.weights.size:
        raise SnapshotError("Velocity and weights differ in length.")
    body = b"".join(
        [
            _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, float(snapshot.epoch), snapshot.d),
            snapshot.weights.astype("<f4").tobytes(),
            snapshot.velocity.astype("<f4").tobytes(),
            bytes(snapshot.rng_state),
        ]
    )
    return body + _TRAILER.pack(crc32c.crc32c(body))


def decode_snapshot(data: bytes, source: str = "snapshot") -> Snapshot:
    if len(data) < _HEADER.size + _TRAILER.size:
        raise FormatError(f"{source} is truncated ({len(data)} bytes).")
    body, trailer = data[: -_TRAILER.size], data[-_TRAILER.size :]
    (expected,) = _TRAILER.unpack(trailer)
    actual = crc32c.crc32c(body)
    if actual != expected:
        raise ChecksumError(f"{source} failed CRC-32C check (stored {expected:#010x}, computed {actual:#010x}).")
    magic, version, epoch, d = _HEADER.unpack(body[: _HEADER.size])
    if magic != SNAPSHOT_MAGIC:
        raise FormatError(f"{source}: expected magic {SNAPSHOT_MAGIC!r}, found {magic!r}.")
    if version != SNAPSHOT_VERSION:
        raise FormatError(f"{source}: unsupported snapshot version {version}.")
    if len(body) != _HEADER.size + 8 * d + RNG_STATE_BYTES:
        raise FormatError(f"{source}: payload length does not match d={d}.")
    offset = _HEADER.size
    weights = np.frombuffer(body, dtype="<f4", count=d, offset=offset).astype(np.float32)
    offset += 4 * d
    velocity = np.frombuffer(body, dtype="<f4", count=d, offset=offset).astype(np.float32)
    offset += 4 * d
    return Snapshot(epoch, weights, velocity, body[offset : offset + RNG_STATE_BYTES])


class SnapshotStore:
    """Snapshots of one training run: files under ``<root>/<run_id>/`` plus a registry index."""

    def __init__(self, root: Path, run_id: str):
        self.root = Path(root)
        self.run_id = run_id
        self.run_dir = self.root / run_id
        self.db_path = str(self.root / "registry.db")
        self.root.mkdir(parents=True, exist_ok=True)
        init_db(self.db_path).close()

    def _path_for(self, epoch: float) -> Path:
        return self.run_dir / f"epoch_{epoch_key(epoch):.6f}.prws"

    def record(self, epoch: float, weights: np.ndarray, velocity: np.ndarray, rng_state: bytes) -> Snapshot:
        """
        Persist a snapshot at epoch g.

        Raises:
            SnapshotError if g was already recorded for this run.
        """
        key = epoch_key(epoch)
        if queries.get_snapshot(self.db_path, self.run_id, key) is not None:
            raise SnapshotError(f"Run {self.run_id} already has a snapshot at epoch {key}.")
        snapshot = Snapshot(key, np.array(weights, dtype=np.float32), np.array(velocity, dtype=np.float32), bytes(rng_state))
        payload = encode_snapshot(snapshot)
        path = self._path_for(key)
        write_atomic(path, payload)
        (checksum,) = _TRAILER.unpack(payload[-_TRAILER.size :])
        try:
            queries.insert_snapshot(self.db_path, self.run_id, key, str(path), checksum)
        except sqlite3.IntegrityError as exc:
            raise SnapshotError(f"Run {self.run_id} already has a snapshot at epoch {key}.") from exc
        queries._safe_log_event(self.run_id, "SNAPSHOT", f"Recorded epoch {key}", "Success", self.db_path)
        return snapshot

    def restore(self, epoch: float) -> Snapshot:
        """
        Load the snapshot at epoch g, verifying both the file trailer and the indexed checksum.

        Raises:
            SnapshotError listing the available epochs when g is missing.
            ChecksumError when the file is corrupted.
        """
        key = epoch_key(epoch)
        row = queries.get_snapshot(self.db_path, self.run_id, key)
        if row is None:
            available = ", ".join(f"{g:g}" for g in self.available_epochs()) or "none"
            raise SnapshotError(f"No snapshot at epoch {key} for run {self.run_id}; available: {available}.")
        path = Path(row["path"])
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise SnapshotError(f"Cannot read snapshot file {path}: {exc}") from exc
        snapshot = decode_snapshot(data, source=str(path))
        (stored,) = _TRAILER.unpack(data[-_TRAILER.size :])
        if stored != row["checksum"]:
            raise ChecksumError(f"{path} does not match the checksum recorded in the registry.")
        return snapshot

    def available_epochs(self) -> List[float]:
        return queries.list_snapshot_epochs(self.db_path, self.run_id)

    def has_epochs(self, epochs: Iterable[float]) -> bool:
        present = set(self.available_epochs())
        return all(epoch_key(g) in present for g in epochs)

    def reset(self) -> None:
        """Forget every snapshot of this run (before re-training it from scratch)."""
        for path in queries.delete_snapshots(self.db_path, self.run_id):
            Path(path).unlink(missing_ok=True)
