import json
import os
from datetime import datetime, timezone

import aiosqlite

DB_PATH = os.getenv(
    "RBMC_DB_PATH",
    os.path.join(os.path.dirname(os.path.dirname(__file__)), "runs.db"),
)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


async def init_db():
    async with aiosqlite.connect(DB_PATH) as db:
        await db.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                kind TEXT NOT NULL,
                preset TEXT,
                seed INTEGER NOT NULL,
                output_dir TEXT NOT NULL,
                status TEXT NOT NULL DEFAULT 'running',
                started_at TEXT NOT NULL,
                finished_at TEXT,
                wall_time_seconds REAL,
                acceptance_rate REAL,
                version TEXT,
                metrics TEXT,
                error TEXT
            )
        """)
        await db.execute("""
            CREATE INDEX IF NOT EXISTS idx_runs_kind
            ON runs(kind, started_at DESC)
        """)
        await db.commit()


async def insert_run(kind: str, preset: str | None, seed: int, output_dir: str) -> int:
    """Record a started run, returning its ID."""
    async with aiosqlite.connect(DB_PATH) as db:
        cursor = await db.execute(
            """
            INSERT INTO runs (kind, preset, seed, output_dir, started_at)
            VALUES (?, ?, ?, ?, ?)
            """,
            (kind, preset, seed, output_dir, _now()),
        )
        await db.commit()
        return cursor.lastrowid


async def finish_run(run_id: int, manifest: dict | None = None, error: str | None = None):
    """Mark a run finished (with its manifest) or failed (with the error text)."""
    status = "failed" if error is not None else "finished"
    manifest = manifest or {}
    async with aiosqlite.connect(DB_PATH) as db:
        await db.execute(
            """
            UPDATE runs
            SET status = ?, finished_at = ?, wall_time_seconds = ?,
                acceptance_rate = ?, version = ?, metrics = ?, error = ?
            WHERE id = ?
            """,
            (
                status,
                _now(),
                manifest.get("wall_time_seconds"),
                manifest.get("acceptance_rate"),
                manifest.get("version"),
                json.dumps(manifest.get("metrics")) if manifest else None,
                error,
                run_id,
            ),
        )
        await db.commit()


def _decode(row) -> dict:
    run = dict(row)
    if run.get("metrics"):
        run["metrics"] = json.loads(run["metrics"])
    return run


async def get_runs(
    kind: str | None = None,
    status: str | None = None,
    limit: int = 100,
    offset: int = 0,
) -> list[dict]:
    conditions = []
    params: list = []

    if kind and kind != "all":
        conditions.append("kind = ?")
        params.append(kind)
    if status and status != "all":
        conditions.append("status = ?")
        params.append(status)

    where = f"WHERE {' AND '.join(conditions)}" if conditions else ""

    async with aiosqlite.connect(DB_PATH) as db:
        db.row_factory = aiosqlite.Row
        rows = await db.execute_fetchall(
            f"SELECT * FROM runs {where} ORDER BY id DESC LIMIT ? OFFSET ?",
            params + [limit, offset],
        )
        return [_decode(row) for row in rows]


async def get_run(run_id: int) -> dict | None:
    async with aiosqlite.connect(DB_PATH) as db:
        db.row_factory = aiosqlite.Row
        rows = await db.execute_fetchall("SELECT * FROM runs WHERE id = ?", (run_id,))
        return _decode(rows[0]) if rows else None


async def get_run_count() -> dict:
    async with aiosqlite.connect(DB_PATH) as db:
        db.row_factory = aiosqlite.Row
        rows = await db.execute_fetchall(
            "SELECT status, COUNT(*) as count FROM runs GROUP BY status"
        )
        counts = {row["status"]: row["count"] for row in rows}
        return {
            "total": sum(counts.values()),
            "running": counts.get("running", 0),
            "finished": counts.get("finished", 0),
            "failed": counts.get("failed", 0),
        }
