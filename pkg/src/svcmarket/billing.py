"""Metric ingestion, bill computation, and usage integrity audits.

Bills are computed off-ledger from the shared usage store, then
committed through a ledger transaction whose execution re-validates all
line arithmetic. Billing periods are anchored to the creation time of
each subscription: period k covers
[created_at + k*interval, created_at + (k+1)*interval). A usage element
counts toward the period containing its end_timestamp. Deleting a
subscription triggers one final, possibly short, period ending at the
deletion time.
"""

from __future__ import annotations

import json

from .canonical import sha256_hex
from .contracts import bill_id_of
from .errors import (
    CHARGE_MISMATCH,
    MALFORMED_REQUEST,
    NOT_FOUND,
    OVERFLOW,
    OperationError,
)
from .resources import MAX_CHARGE, validate_resource_value
from .usage import UsageStore, flatten_records

_RECORD_KEYS = {
    "service",
    "tenant",
    "resource_name",
    "metric",
    "unit",
    "rate",
    "currency",
    "usage",
}
_ELEMENT_KEYS = {"unitsUsed", "charge", "start_timestamp", "end_timestamp"}


def _require_int(value, what: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise OperationError(MALFORMED_REQUEST, f"{what} must be an integer")
    return value


def validate_metric_records(state: dict, service: str, records: list[dict]) -> None:
    """Check a usage batch against the committed marketplace state.

    Every record must reference a live subscription and quote exactly
    the metric terms (unit, rate, currency) of the subscribed resource;
    every element's charge must equal unitsUsed times the quoted rate.
    """
    if not isinstance(records, list) or not records:
        raise OperationError(MALFORMED_REQUEST, "records must be a non-empty list")
    subscriptions = state["subscriptions"]
    for i, record in enumerate(records):
        where = f"records[{i}]"
        if not isinstance(record, dict) or set(record) != _RECORD_KEYS:
            raise OperationError(MALFORMED_REQUEST, f"{where}: bad record shape")
        if record["service"] != service:
            raise OperationError(MALFORMED_REQUEST, f"{where}: service mismatch")
        delegation_id = (
            subscriptions.get(record["tenant"], {})
            .get(service, {})
            .get(record["resource_name"])
        )
        if delegation_id is None:
            raise OperationError(NOT_FOUND, f"{where}: no active subscription")
        doc = validate_resource_value(
            state["services"][service]["resources"][record["resource_name"]]["document"]
        )
        metric = doc.metric(record["metric"])
        if metric is None:
            raise OperationError(NOT_FOUND, f"{where}: unknown metric {record['metric']!r}")
        if (
            record["unit"] != metric.unit
            or record["rate"] != metric.rate
            or record["currency"] != metric.currency
        ):
            raise OperationError(
                CHARGE_MISMATCH, f"{where}: metric terms differ from the resource definition"
            )
        if not isinstance(record["usage"], list) or not record["usage"]:
            raise OperationError(MALFORMED_REQUEST, f"{where}: usage must be a non-empty list")
        for j, element in enumerate(record["usage"]):
            at = f"{where}.usage[{j}]"
            if not isinstance(element, dict) or set(element) != _ELEMENT_KEYS:
                raise OperationError(MALFORMED_REQUEST, f"{at}: bad element shape")
            units = _require_int(element["unitsUsed"], f"{at}.unitsUsed")
            charge = _require_int(element["charge"], f"{at}.charge")
            start = _require_int(element["start_timestamp"], f"{at}.start_timestamp")
            end = _require_int(element["end_timestamp"], f"{at}.end_timestamp")
            if units < 0:
                raise OperationError(MALFORMED_REQUEST, f"{at}: negative unitsUsed")
            if start >= end:
                raise OperationError(MALFORMED_REQUEST, f"{at}: empty time window")
            expected = units * metric.rate
            if expected > MAX_CHARGE:
                raise OperationError(OVERFLOW, f"{at}: charge exceeds the representable maximum")
            if charge != expected:
                raise OperationError(
                    CHARGE_MISMATCH,
                    f"{at}: charge {charge} != unitsUsed * rate = {expected}",
                )


def ingest_batch(store: UsageStore, service: str, records: list[dict], now: int) -> dict:
    """Persist a validated batch; returns what the anchor tx needs."""
    batch_id, digest, created = store.append_batch(service, records, now)
    return {"batch_id": batch_id, "digest": digest, "created": created}


def resource_currency(doc) -> str:
    # resources without metrics still produce (zero-total) bills
    return doc.metrics[0].currency if doc.metrics else "XXX"


def compute_bills(state: dict, store: UsageStore, now: int) -> list[dict]:
    """All billable periods that have closed by `now` and lack a bill.

    Covers active and deleted subscriptions alike; a deleted one gets a
    final period truncated at its deletion time. Bills for periods with
    no usage are emitted with total 0 so tenants see an unbroken
    sequence of statements.
    """
    billed: dict[str, int] = {}
    for bill in state["bills"].values():
        delegation_id = bill["delegation_id"]
        billed[delegation_id] = max(billed.get(delegation_id, 0), bill["period_end"])
    out = []
    for delegation_id, delegation in sorted(state["delegations"].items()):
        if delegation["depth"] == 0:
            continue
        service = state["services"].get(delegation["service"])
        if service is None:
            continue
        resource = service["resources"].get(delegation["resource_name"])
        if resource is None:
            continue
        doc = validate_resource_value(resource["document"])
        interval = doc.charging_interval
        created = delegation["created_at"]
        deleted_at = delegation.get("deleted_at")
        horizon = now if deleted_at is None else min(now, deleted_at)
        cursor = billed.get(delegation_id, created)
        while cursor + interval <= horizon:
            out.append(_build_bill(store, delegation, doc, cursor, cursor + interval))
            cursor += interval
        if deleted_at is not None and deleted_at <= now and cursor < deleted_at:
            out.append(_build_bill(store, delegation, doc, cursor, deleted_at))
    return out


def _build_bill(store: UsageStore, delegation: dict, doc, period_start: int, period_end: int) -> dict:
    tenant = delegation["grantee"]
    service = delegation["service"]
    resource_name = delegation["resource_name"]
    line_items = []
    total = 0
    for metric in doc.metrics:
        units = store.sum_usage(tenant, service, resource_name, metric.name, period_start, period_end)
        charge = units * metric.rate
        total += charge
        line_items.append(
            {
                "metric": metric.name,
                "unit": metric.unit,
                "unitsUsed": units,
                "rate": metric.rate,
                "charge": charge,
            }
        )
    return {
        "bill_id": bill_id_of(tenant, service, resource_name, period_start, period_end),
        "tenant": tenant,
        "service": service,
        "resource_name": resource_name,
        "delegation_id": delegation["delegation_id"],
        "period_start": period_start,
        "period_end": period_end,
        "line_items": line_items,
        "total": total,
        "currency": resource_currency(doc),
    }


def verify_usage_integrity(state: dict, store: UsageStore, service: str | None = None) -> dict:
    """Audit the off-ledger store against the on-ledger anchors.

    Each stored batch must hash to the digest anchored for its id, and
    the indexed element rows must be exactly the flattening of the
    stored raw records. Anchors without a stored batch are reported too:
    the ledger proves the batch existed, so its absence is a finding.
    """
    anchors = state["anchors"]
    findings = []
    checked = 0
    seen = set()
    for batch in store.list_batches(service):
        checked += 1
        batch_id = batch["batch_id"]
        seen.add(batch_id)
        anchor = anchors.get(batch_id)
        if anchor is None:
            findings.append({"batch_id": batch_id, "status": "UNANCHORED"})
            continue
        blob = batch["records_json"]
        if sha256_hex(blob) != anchor["digest"]:
            findings.append({"batch_id": batch_id, "status": "DIGEST_MISMATCH"})
            continue
        try:
            records = json.loads(blob)
            expected_rows = flatten_records(batch_id, records)
        except Exception:
            findings.append({"batch_id": batch_id, "status": "DIGEST_MISMATCH"})
            continue
        if store.elements_for_batch(batch_id) != expected_rows:
            findings.append({"batch_id": batch_id, "status": "ELEMENTS_DIVERGED"})
    for batch_id, anchor in sorted(anchors.items()):
        if batch_id in seen:
            continue
        if service is not None and anchor["service"] != service:
            continue
        checked += 1
        findings.append({"batch_id": batch_id, "status": "MISSING_BATCH"})
    return {"clean": not findings, "checked": checked, "findings": findings}
