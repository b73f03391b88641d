"""SQLite ledger of harness encode jobs.

The ledger remembers every finished job, successful or not, so an
interrupted dataset build resumes where it stopped and failed jobs are
reported only once.
"""

import json
import logging
import sqlite3
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

logger = logging.getLogger("CAPS")

JobKey = Tuple[str, int, float, int]  # (segment_id, width, bitrate_kbps, preset)

STATUS_OK = "ok"


class JobLedger:
    """Job outcomes stored in a SQLite file next to the dataset."""

    def __init__(self, path: str):
        self.path = Path(path)
        self.init_db()

    def get_connection(self) -> sqlite3.Connection:
        """Get a database connection.

        Returns:
            SQLite connection object
        """
        self.path.parent.mkdir(parents=True, exist_ok=True)
        conn = sqlite3.connect(str(self.path))
        conn.row_factory = sqlite3.Row
        return conn

    def init_db(self) -> None:
        """Create the jobs table if it doesn't exist."""
        conn = self.get_connection()
        try:
            cursor = conn.cursor()
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS harness_jobs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    segment_id TEXT NOT NULL,
                    width INTEGER NOT NULL,
                    bitrate_kbps REAL NOT NULL,
                    preset INTEGER NOT NULL,
                    status TEXT NOT NULL,
                    wall_time REAL,
                    cpu_time REAL,
                    detail TEXT,
                    dataset_row TEXT,
                    updated_at TEXT DEFAULT CURRENT_TIMESTAMP,
                    UNIQUE(segment_id, width, bitrate_kbps, preset)
                )
            """)
            conn.commit()
        finally:
            conn.close()

    def record(
        self,
        key: JobKey,
        status: str,
        wall_time: Optional[float] = None,
        cpu_time: Optional[float] = None,
        detail: str = "",
        dataset_row: Optional[Dict[str, Any]] = None,
    ) -> None:
        """Insert or replace the outcome of one job."""
        segment_id, width, bitrate, preset = key
        conn = self.get_connection()
        try:
            cursor = conn.cursor()
            cursor.execute(
                """
                INSERT INTO harness_jobs
                (segment_id, width, bitrate_kbps, preset, status, wall_time, cpu_time,
                 detail, dataset_row, updated_at)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
                ON CONFLICT(segment_id, width, bitrate_kbps, preset) DO UPDATE SET
                status = excluded.status,
                wall_time = excluded.wall_time,
                cpu_time = excluded.cpu_time,
                detail = excluded.detail,
                dataset_row = excluded.dataset_row,
                updated_at = excluded.updated_at
                """,
                (
                    segment_id, int(width), float(bitrate), int(preset), status,
                    wall_time, cpu_time, detail,
                    json.dumps(dataset_row) if dataset_row is not None else None,
                    datetime.now(timezone.utc).isoformat(),
                ),
            )
            conn.commit()
        finally:
            conn.close()

    def finished_jobs(self, include_failed: bool = True) -> Dict[JobKey, str]:
        """Keys of jobs already in the ledger, mapped to their status."""
        conn = self.get_connection()
        try:
            cursor = conn.cursor()
            cursor.execute("SELECT segment_id, width, bitrate_kbps, preset, status FROM harness_jobs")
            result: Dict[JobKey, str] = {}
            for row in cursor.fetchall():
                if not include_failed and row["status"] != STATUS_OK:
                    continue
                key = (row["segment_id"], int(row["width"]), float(row["bitrate_kbps"]), int(row["preset"]))
                result[key] = row["status"]
            return result
        finally:
            conn.close()

    def dataset_rows(self) -> List[Dict[str, Any]]:
        """Dataset rows of successful jobs in job-key order."""
        conn = self.get_connection()
        try:
            cursor = conn.cursor()
            cursor.execute("""
                SELECT dataset_row FROM harness_jobs
                WHERE status = ? AND dataset_row IS NOT NULL
                ORDER BY segment_id, width, bitrate_kbps, preset
            """, (STATUS_OK,))
            return [json.loads(row["dataset_row"]) for row in cursor.fetchall()]
        finally:
            conn.close()

    def failure_count(self) -> int:
        """Number of jobs recorded as failed."""
        conn = self.get_connection()
        try:
            cursor = conn.cursor()
            cursor.execute("SELECT COUNT(*) FROM harness_jobs WHERE status != ?", (STATUS_OK,))
            return cursor.fetchone()[0]
        finally:
            conn.close()
