"""
Registry initialization for PruneLab.
Creates SQLite tables for runs, snapshots and audit_logs.
Provides the audit-log helper every other module writes through.
"""

import sqlite3
from datetime import datetime
from pathlib import Path

DB_PATH = "registry.db"


def init_db(db_path: str = DB_PATH) -> sqlite3.Connection:
    """
    Initialize the run registry with all required tables.

    Creates the following tables if they don't already exist:
      - runs
      - snapshots
      - audit_logs

    Args:
        db_path: Path to the SQLite database file (default: registry.db)

    Returns:
        A sqlite3 Connection object to the database.
    """
    db_file = Path(db_path)
    db_file.parent.mkdir(parents=True, exist_ok=True)

    conn = sqlite3.connect(db_path)
    cursor = conn.cursor()

    # ── runs ─────────────────────────────────────────────────────────
    cursor.execute("""
        CREATE TABLE IF NOT EXISTS runs (
            run_id       TEXT PRIMARY KEY,
            arch         TEXT NOT NULL,
            seed         INTEGER NOT NULL,
            total_epochs REAL NOT NULL,
            config_json  TEXT,
            status       TEXT NOT NULL DEFAULT 'Training',
            created_at   DATETIME DEFAULT CURRENT_TIMESTAMP
        );
    """)

    # ── snapshots ────────────────────────────────────────────────────
    cursor.execute("""
        CREATE TABLE IF NOT EXISTS snapshots (
            id          INTEGER PRIMARY KEY AUTOINCREMENT,
            run_id      TEXT NOT NULL,
            epoch       REAL NOT NULL,
            path        TEXT NOT NULL,
            checksum    INTEGER NOT NULL,
            recorded_at DATETIME DEFAULT CURRENT_TIMESTAMP,
            UNIQUE(run_id, epoch),
            FOREIGN KEY(run_id) REFERENCES runs(run_id)
        );
    """)

    # ── audit_logs ───────────────────────────────────────────────────
    cursor.execute("""
        CREATE TABLE IF NOT EXISTS audit_logs (
            id          INTEGER PRIMARY KEY AUTOINCREMENT,
            timestamp   DATETIME DEFAULT CURRENT_TIMESTAMP,
            user        TEXT,
            category    TEXT,
            description TEXT,
            status      TEXT
        );
    """)

    conn.commit()
    return conn


def log_event(
    source: str,
    category: str,
    description: str,
    status: str,
    db_path: str = DB_PATH,
) -> None:
    """
    Append one audit-log entry for a run or command.

    Args:
        source:      Run id (or command name) the event belongs to.
        category:    Event category (e.g. 'TRAIN', 'SNAPSHOT', 'RETRAIN').
        description: Human-readable description of the event.
        status:      Outcome status ('Success' or 'Failed').
        db_path:     Path to the registry file.
    """
    conn = sqlite3.connect(db_path)
    try:
        conn.execute(
            "INSERT INTO audit_logs (timestamp, user, category, description, status) VALUES (?, ?, ?, ?, ?);",
            (datetime.now().isoformat(), source, category, description, status),
        )
        conn.commit()
    finally:
        conn.close()


if __name__ == "__main__":
    import sys

    path = sys.argv[1] if len(sys.argv) > 1 else DB_PATH
    try:
        db_conn = init_db(path)
        runs = db_conn.execute("SELECT COUNT(*) FROM runs").fetchone()[0]
        snapshots = db_conn.execute("SELECT COUNT(*) FROM snapshots").fetchone()[0]
        db_conn.close()
        print(f"✓ Registry ready at {path}: {runs} run(s), {snapshots} snapshot(s)")
    except sqlite3.Error as e:
        print(f"✗ Cannot open registry {path}: {e}")
        sys.exit(1)
