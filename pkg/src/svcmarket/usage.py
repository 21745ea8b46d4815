"""Off-ledger bulk usage store.

Metric usage arrives in batches too bulky for the ledger itself; each
batch is stored here verbatim while only a signed digest is anchored
on-ledger. The original canonical bytes of every batch are retained so
digests can be recomputed for integrity audits; a flattened, indexed
copy of the usage elements serves queries and billing sums.

The store is deployment-shared infrastructure (every API node of one
marketplace points at the same database), mirroring a shared external
store; sqlite in WAL mode handles the concurrency involved at this
scale.
"""

from __future__ import annotations

import json
import sqlite3
import threading
from pathlib import Path

from .canonical import canonical_json, sha256_hex

_SCHEMA = """
CREATE TABLE IF NOT EXISTS batches (
    batch_id TEXT PRIMARY KEY,
    service TEXT NOT NULL,
    digest TEXT NOT NULL,
    records_json BLOB NOT NULL,
    created_at INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS elements (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    batch_id TEXT NOT NULL,
    service TEXT NOT NULL,
    tenant TEXT NOT NULL,
    resource_name TEXT NOT NULL,
    metric TEXT NOT NULL,
    unit TEXT NOT NULL,
    rate INTEGER NOT NULL,
    currency TEXT NOT NULL,
    units_used INTEGER NOT NULL,
    charge INTEGER NOT NULL,
    start_timestamp INTEGER NOT NULL,
    end_timestamp INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS idx_elements_lookup
    ON elements (tenant, service, resource_name, end_timestamp);
CREATE INDEX IF NOT EXISTS idx_elements_batch ON elements (batch_id);
"""


def batch_id_of(service: str, records: list[dict]) -> str:
    return sha256_hex(canonical_json({"records": records, "service": service}))


def records_digest(records: list[dict]) -> str:
    return sha256_hex(canonical_json(records))


def flatten_records(batch_id: str, records: list[dict]) -> list[tuple]:
    rows = []
    for record in records:
        for element in record["usage"]:
            rows.append(
                (
                    batch_id,
                    record["service"],
                    record["tenant"],
                    record["resource_name"],
                    record["metric"],
                    record["unit"],
                    record["rate"],
                    record["currency"],
                    element["unitsUsed"],
                    element["charge"],
                    element["start_timestamp"],
                    element["end_timestamp"],
                )
            )
    return rows


class UsageStore:
    def __init__(self, path: str | Path):
        self._conn = sqlite3.connect(str(path), check_same_thread=False)
        self._conn.execute("PRAGMA journal_mode=WAL")
        self._conn.execute("PRAGMA synchronous=NORMAL")
        self._lock = threading.Lock()
        with self._lock:
            self._conn.executescript(_SCHEMA)
            self._conn.commit()

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    def append_batch(self, service: str, records: list[dict], created_at: int) -> tuple[str, str, bool]:
        """Store a batch; returns (batch_id, digest, newly_created).

        Re-pushing an identical batch is a no-op, which makes delivery
        at-least-once safe.
        """
        batch_id = batch_id_of(service, records)
        digest = records_digest(records)
        blob = canonical_json(records)
        with self._lock:
            cur = self._conn.execute(
                "INSERT OR IGNORE INTO batches (batch_id, service, digest, records_json, created_at) "
                "VALUES (?, ?, ?, ?, ?)",
                (batch_id, service, digest, blob, created_at),
            )
            created = cur.rowcount == 1
            if created:
                self._conn.executemany(
                    "INSERT INTO elements (batch_id, service, tenant, resource_name, metric, "
                    "unit, rate, currency, units_used, charge, start_timestamp, end_timestamp) "
                    "VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
                    flatten_records(batch_id, records),
                )
            self._conn.commit()
        return batch_id, digest, created

    def detailed_records(
        self,
        tenant: str,
        service: str,
        resource_name: str,
        start: int | None = None,
        end: int | None = None,
    ) -> list[dict]:
        """Raw stored records, usage arrays filtered to [start, end).

        An element belongs to the window iff its end_timestamp does.
        Records left with no elements are omitted.
        """
        with self._lock:
            rows = self._conn.execute(
                "SELECT records_json FROM batches WHERE service = ? ORDER BY created_at, batch_id",
                (service,),
            ).fetchall()
        out = []
        for (blob,) in rows:
            for record in json.loads(blob):
                if record["tenant"] != tenant or record["resource_name"] != resource_name:
                    continue
                usage = [
                    e
                    for e in record["usage"]
                    if (start is None or e["end_timestamp"] >= start)
                    and (end is None or e["end_timestamp"] < end)
                ]
                if usage:
                    out.append({**record, "usage": usage})
        return out

    def consolidated_records(
        self,
        tenant: str,
        service: str,
        resource_name: str,
        start: int | None = None,
        end: int | None = None,
    ) -> list[dict]:
        """One record per metric with usage summed over the window."""
        clauses = ["tenant = ?", "service = ?", "resource_name = ?"]
        params: list = [tenant, service, resource_name]
        if start is not None:
            clauses.append("end_timestamp >= ?")
            params.append(start)
        if end is not None:
            clauses.append("end_timestamp < ?")
            params.append(end)
        sql = (
            "SELECT metric, unit, rate, currency, SUM(units_used), SUM(charge), "
            "MIN(start_timestamp), MAX(end_timestamp) FROM elements WHERE "
            + " AND ".join(clauses)
            + " GROUP BY metric, unit, rate, currency ORDER BY metric"
        )
        with self._lock:
            rows = self._conn.execute(sql, params).fetchall()
        return [
            {
                "service": service,
                "tenant": tenant,
                "resource_name": resource_name,
                "metric": metric,
                "unit": unit,
                "rate": rate,
                "currency": currency,
                "usage": [
                    {
                        "unitsUsed": units,
                        "charge": charge,
                        "start_timestamp": first_start,
                        "end_timestamp": last_end,
                    }
                ],
            }
            for metric, unit, rate, currency, units, charge, first_start, last_end in rows
        ]

    def sum_usage(
        self,
        tenant: str,
        service: str,
        resource_name: str,
        metric: str,
        start: int,
        end: int,
    ) -> int:
        """Total units for one metric over [start, end) by end_timestamp."""
        with self._lock:
            row = self._conn.execute(
                "SELECT COALESCE(SUM(units_used), 0) FROM elements WHERE tenant = ? AND "
                "service = ? AND resource_name = ? AND metric = ? AND "
                "end_timestamp >= ? AND end_timestamp < ?",
                (tenant, service, resource_name, metric, start, end),
            ).fetchone()
        return int(row[0])

    def list_batches(self, service: str | None = None) -> list[dict]:
        sql = "SELECT batch_id, service, digest, records_json, created_at FROM batches"
        params: tuple = ()
        if service is not None:
            sql += " WHERE service = ?"
            params = (service,)
        sql += " ORDER BY created_at, batch_id"
        with self._lock:
            rows = self._conn.execute(sql, params).fetchall()
        return [
            {
                "batch_id": batch_id,
                "service": svc,
                "digest": digest,
                "records_json": bytes(blob),
                "created_at": created_at,
            }
            for batch_id, svc, digest, blob, created_at in rows
        ]

    def elements_for_batch(self, batch_id: str) -> list[tuple]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT batch_id, service, tenant, resource_name, metric, unit, rate, currency, "
                "units_used, charge, start_timestamp, end_timestamp FROM elements "
                "WHERE batch_id = ? ORDER BY id",
                (batch_id,),
            ).fetchall()
        return [tuple(r) for r in rows]

    # test hook: integrity audits must see raw storage, not the API above
    def execute_raw(self, sql: str, params: tuple = ()):  # pragma: no cover - passthrough
        with self._lock:
            cur = self._conn.execute(sql, params)
            self._conn.commit()
            return cur.fetchall()
