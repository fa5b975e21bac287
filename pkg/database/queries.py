"""
Registry query operations for PruneLab.
Handles run registration, the snapshot index and audit-log reads.
"""

import sqlite3
from typing import Dict, List, Optional, Tuple

from database.db_init import log_event
from utils import log


def _safe_log_event(source: str, category: str, description: str, status: str, db_path: str) -> None:
    """Audit-log write that never interrupts the run; a failed write is reported on the console."""
    try:
        log_event(source, category, description, status, db_path)
    except sqlite3.Error as exc:
        log(f"Audit log write to {db_path} failed: {exc}", "WARN")


def register_run(
    db_path: str,
    run_id: str,
    arch: str,
    seed: int,
    total_epochs: float,
    config_json: str = "",
) -> None:
    """
    Insert a run row, replacing any stale row with the same id.

    Args:
        db_path: Path to the registry.
        run_id: Unique run identifier.
        arch: Architecture name.
        seed: Base training seed.
        total_epochs: T of the original training run.
        config_json: Serialized experiment config for provenance.
    """
    conn = sqlite3.connect(db_path)
    try:
        conn.execute(
            """
            INSERT INTO runs (run_id, arch, seed, total_epochs, config_json, status)
            VALUES (?, ?, ?, ?, ?, 'Training')
            ON CONFLICT(run_id) DO UPDATE SET
                arch = excluded.arch,
                seed = excluded.seed,
                total_epochs = excluded.total_epochs,
                config_json = excluded.config_json,
                status = 'Training'
            """,
            (run_id, arch, int(seed), float(total_epochs), config_json),
        )
        conn.commit()
    finally:
        conn.close()


def set_run_status(db_path: str, run_id: str, status: str) -> None:
    conn = sqlite3.connect(db_path)
    try:
        conn.execute("UPDATE runs SET status = ? WHERE run_id = ?", (status, run_id))
        conn.commit()
    finally:
        conn.close()


def get_run(db_path: str, run_id: str) -> Tuple[bool, Optional[Dict]]:
    """
    Retrieve a run row.

    Returns:
        (True, row dict) when found, (True, None) when absent, (False, None) on error.
    """
    conn = None
    try:
        conn = sqlite3.connect(db_path)
        conn.row_factory = sqlite3.Row
        row = conn.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,)).fetchone()
        return True, dict(row) if row else None
    except sqlite3.DatabaseError:
        return False, None
    finally:
        if conn:
            conn.close()


def insert_snapshot(db_path: str, run_id: str, epoch: float, path: str, checksum: int) -> None:
    """
    Index a snapshot file. Raises sqlite3.IntegrityError on a duplicate epoch.
    """
    conn = sqlite3.connect(db_path)
    try:
        conn.execute(
            "INSERT INTO snapshots (run_id, epoch, path, checksum) VALUES (?, ?, ?, ?)",
            (run_id, float(epoch), path, int(checksum)),
        )
        conn.commit()
    finally:
        conn.close()


def get_snapshot(db_path: str, run_id: str, epoch: float) -> Optional[Dict]:
    conn = sqlite3.connect(db_path)
    conn.row_factory = sqlite3.Row
    try:
        row = conn.execute(
            "SELECT epoch, path, checksum FROM snapshots WHERE run_id = ? AND epoch = ?",
            (run_id, float(epoch)),
        ).fetchone()
        return dict(row) if row else None
    finally:
        conn.close()


def list_snapshot_epochs(db_path: str, run_id: str) -> List[float]:
    conn = sqlite3.connect(db_path)
    try:
        rows = conn.execute(
            "SELECT epoch FROM snapshots WHERE run_id = ? ORDER BY epoch ASC", (run_id,)
        ).fetchall()
        return [float(row[0]) for row in rows]
    finally:
        conn.close()


def delete_snapshots(db_path: str, run_id: str) -> List[str]:
    """
    Remove a run's snapshot index rows.

    Returns:
        The file paths that were indexed, so the caller can delete them.
    """
    conn = sqlite3.connect(db_path)
    try:
        rows = conn.execute("SELECT path FROM snapshots WHERE run_id = ?", (run_id,)).fetchall()
        conn.execute("DELETE FROM snapshots WHERE run_id = ?", (run_id,))
        conn.commit()
        return [row[0] for row in rows]
    finally:
        conn.close()


def get_all_logs(db_path: str) -> Tuple[bool, List[Dict]]:
    """
    Retrieve every audit-log entry, newest first.

    Returns:
        A tuple (success: bool, logs: List[Dict]).
    """
    conn = None
    try:
        conn = sqlite3.connect(db_path)
        conn.row_factory = sqlite3.Row
        rows = conn.execute(
            "SELECT id, timestamp, user, category, description, status FROM audit_logs ORDER BY id DESC"
        ).fetchall()
        return True, [dict(row) for row in rows]
    except sqlite3.DatabaseError:
        return False, []
    except Exception:
        return False, []
    finally:
        if conn:
            conn.close()
