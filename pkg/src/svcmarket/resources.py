"""Resource descriptions and quota accounting.

A resource is a named bundle a tenant can subscribe to, described by a
JSON document with four kinds of service-defined attributes:

- simple attributes: a single unstructured value (e.g. a fixed disk size),
- renewable quota attributes: limits that reset each charging interval,
- nonrenewable quota attributes: absolute lifetime limits,
- metrics: chargeable attributes (usage x rate accrues charges).

Plus two required intervals: ``usage_tracking_interval`` (reporting
cadence) and ``charging_interval`` (billing period), both in seconds.

Parsing is strict: unknown keys are rejected so a signed document cannot
smuggle unvalidated content, and every rejection names the JSON path of
the first violated rule.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, replace

from . import canonical
from .errors import MALFORMED_RESOURCE, OVERFLOW, QUOTA_EXCEEDED, OperationError

# Charges must stay within signed 64-bit range for interop with other stacks.
MAX_CHARGE = 2**63 - 1

_CURRENCY_RE = re.compile(r"^[A-Z]{3}$")

KIND_RENEWABLE = "renewable"
KIND_NONRENEWABLE = "nonrenewable"


@dataclass(frozen=True)
class SimpleAttribute:
    name: str
    value: str
    description: str


@dataclass(frozen=True)
class QuotaAttribute:
    name: str
    unit: str
    quota: int
    description: str


@dataclass(frozen=True)
class MetricDefinition:
    name: str
    unit: str
    rate: int  # currency minor units per unit consumed
    currency: str
    description: str


@dataclass(frozen=True)
class ResourceDescription:
    name: str
    simple_attributes: tuple[SimpleAttribute, ...] = ()
    renewable_quota_attributes: tuple[QuotaAttribute, ...] = ()
    nonrenewable_quota_attributes: tuple[QuotaAttribute, ...] = ()
    metrics: tuple[MetricDefinition, ...] = ()
    usage_tracking_interval: int = 60
    charging_interval: int = 3600

    def to_dict(self) -> dict:
        return {
            "resource": {
                "name": self.name,
                "simple_attributes": [asdict(a) for a in self.simple_attributes],
                "renewable_quota_attributes": [
                    asdict(a) for a in self.renewable_quota_attributes
                ],
                "nonrenewable_quota_attributes": [
                    asdict(a) for a in self.nonrenewable_quota_attributes
                ],
                "metrics": [asdict(m) for m in self.metrics],
                "usage_tracking_interval": self.usage_tracking_interval,
                "charging_interval": self.charging_interval,
            }
        }

    def metric(self, name: str) -> MetricDefinition | None:
        for m in self.metrics:
            if m.name == name:
                return m
        return None

    def quota_attribute(self, name: str) -> tuple[QuotaAttribute, str] | None:
        for a in self.renewable_quota_attributes:
            if a.name == name:
                return a, KIND_RENEWABLE
        for a in self.nonrenewable_quota_attributes:
            if a.name == name:
                return a, KIND_NONRENEWABLE
        return None


def _fail(path: str, reason: str) -> OperationError:
    return OperationError(MALFORMED_RESOURCE, f"{path}: {reason}")


def _require_str(obj: dict, key: str, path: str, allow_empty: bool = True) -> str:
    if key not in obj:
        raise _fail(f"{path}.{key}", "missing required field")
    value = obj[key]
    if not isinstance(value, str):
        raise _fail(f"{path}.{key}", "must be a string")
    if not allow_empty and not value:
        raise _fail(f"{path}.{key}", "must be non-empty")
    return value


def _require_int(obj: dict, key: str, path: str, minimum: int | None = None) -> int:
    if key not in obj:
        raise _fail(f"{path}.{key}", "missing required field")
    value = obj[key]
    # bool is an int subclass; reject it explicitly
    if not isinstance(value, int) or isinstance(value, bool):
        raise _fail(f"{path}.{key}", "must be an integer")
    if minimum is not None and value < minimum:
        raise _fail(f"{path}.{key}", f"must be >= {minimum}")
    return value


def _check_keys(obj: dict, allowed: set[str], path: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise _fail(f"{path}.{sorted(unknown)[0]}", "unknown field")


def _parse_simple(obj, path: str) -> SimpleAttribute:
    if not isinstance(obj, dict):
        raise _fail(path, "must be an object")
    _check_keys(obj, {"name", "value", "description"}, path)
    return SimpleAttribute(
        name=_require_str(obj, "name", path, allow_empty=False),
        value=_require_str(obj, "value", path),
        description=_require_str(obj, "description", path),
    )


def _parse_quota(obj, path: str) -> QuotaAttribute:
    if not isinstance(obj, dict):
        raise _fail(path, "must be an object")
    _check_keys(obj, {"name", "unit", "quota", "description"}, path)
    return QuotaAttribute(
        name=_require_str(obj, "name", path, allow_empty=False),
        unit=_require_str(obj, "unit", path),
        quota=_require_int(obj, "quota", path, minimum=0),
        description=_require_str(obj, "description", path),
    )


def _parse_metric(obj, path: str) -> MetricDefinition:
    if not isinstance(obj, dict):
        raise _fail(path, "must be an object")
    _check_keys(obj, {"name", "unit", "rate", "currency", "description"}, path)
    currency = _require_str(obj, "currency", path)
    if not _CURRENCY_RE.match(currency):
        raise _fail(f"{path}.currency", "must be a three-letter currency symbol")
    return MetricDefinition(
        name=_require_str(obj, "name", path, allow_empty=False),
        unit=_require_str(obj, "unit", path),
        rate=_require_int(obj, "rate", path, minimum=0),
        currency=currency,
        description=_require_str(obj, "description", path),
    )


def _parse_list(value, path: str, item_parser) -> tuple:
    if not isinstance(value, list):
        raise _fail(path, "must be an array")
    return tuple(item_parser(item, f"{path}[{i}]") for i, item in enumerate(value))


def validate_resource_value(value) -> ResourceDescription:
    """Validate an already-parsed JSON value against the resource grammar."""
    if not isinstance(value, dict):
        raise _fail("$", "document root must be an object")
    _check_keys(value, {"resource"}, "$")
    if "resource" not in value:
        raise _fail("$.resource", "missing required field")
    body = value["resource"]
    path = "$.resource"
    if not isinstance(body, dict):
        raise _fail(path, "must be an object")
    _check_keys(
        body,
        {
            "name",
            "simple_attributes",
            "renewable_quota_attributes",
            "nonrenewable_quota_attributes",
            "metrics",
            "usage_tracking_interval",
            "charging_interval",
        },
        path,
    )
    name = _require_str(body, "name", path, allow_empty=False)
    for key in (
        "simple_attributes",
        "renewable_quota_attributes",
        "nonrenewable_quota_attributes",
        "metrics",
    ):
        if key not in body:
            raise _fail(f"{path}.{key}", "missing required field")
    simple = _parse_list(body["simple_attributes"], f"{path}.simple_attributes", _parse_simple)
    renewable = _parse_list(
        body["renewable_quota_attributes"], f"{path}.renewable_quota_attributes", _parse_quota
    )
    nonrenewable = _parse_list(
        body["nonrenewable_quota_attributes"],
        f"{path}.nonrenewable_quota_attributes",
        _parse_quota,
    )
    metrics = _parse_list(body["metrics"], f"{path}.metrics", _parse_metric)
    tracking = _require_int(body, "usage_tracking_interval", path, minimum=1)
    charging = _require_int(body, "charging_interval", path, minimum=1)
    if charging < tracking:
        raise _fail(
            f"{path}.charging_interval",
            "must be >= usage_tracking_interval",
        )

    seen: set[str] = set()
    for group, items in (
        ("simple_attributes", simple),
        ("renewable_quota_attributes", renewable),
        ("nonrenewable_quota_attributes", nonrenewable),
        ("metrics", metrics),
    ):
        for i, item in enumerate(items):
            if item.name in seen:
                raise _fail(f"{path}.{group}[{i}].name", f"duplicate name {item.name!r}")
            seen.add(item.name)

    # Billing emits one bill per period with a single currency, so a
    # resource's metrics must agree on it.
    currencies = {m.currency for m in metrics}
    if len(currencies) > 1:
        raise _fail(f"{path}.metrics", "all metrics must share one currency")

    return ResourceDescription(
        name=name,
        simple_attributes=simple,
        renewable_quota_attributes=renewable,
        nonrenewable_quota_attributes=nonrenewable,
        metrics=metrics,
        usage_tracking_interval=tracking,
        charging_interval=charging,
    )


def parse_resource_description(text: str | bytes) -> ResourceDescription:
    """Parse and validate a resource description document.

    Total over arbitrary input: any byte sequence either yields a valid
    description or raises MALFORMED_RESOURCE with a path-addressed reason.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise _fail("$", f"not valid UTF-8: {exc}") from exc
    try:
        value = json.loads(text)
    except (ValueError, RecursionError) as exc:
        raise _fail("$", f"not valid JSON: {exc}") from exc
    try:
        return validate_resource_value(value)
    except OperationError:
        raise
    except RecursionError as exc:  # deeply nested arrays/objects
        raise _fail("$", f"document too deeply nested: {exc}") from exc


def canonicalize(rd: ResourceDescription) -> bytes:
    """Deterministic byte form; parse(canonicalize(rd)) == rd."""
    return canonical.canonical_json(rd.to_dict())


def resource_digest(rd: ResourceDescription) -> str:
    return canonical.sha256_hex(canonicalize(rd))


# --- quota accounting ---------------------------------------------------------


@dataclass(frozen=True)
class QuotaLedgerEntry:
    """Consumption counter for one quota attribute under one delegation."""

    delegation_id: str
    attribute: str
    kind: str  # renewable | nonrenewable
    quota: int
    units_used: int = 0
    period_start: int = 0  # renewable only; anchored to delegation creation
    charging_interval: int = 3600

    def to_dict(self) -> dict:
        return {
            "delegation_id": self.delegation_id,
            "attribute": self.attribute,
            "kind": self.kind,
            "quota": self.quota,
            "units_used": self.units_used,
            "period_start": self.period_start,
            "charging_interval": self.charging_interval,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuotaLedgerEntry":
        return cls(**d)


def renew_if_due(entry: QuotaLedgerEntry, at: int) -> QuotaLedgerEntry:
    """Advance a renewable entry across any elapsed charging-interval boundaries.

    Resets happen exactly at period_start + k * charging_interval and never
    between; nonrenewable entries never reset.
    """
    if entry.kind != KIND_RENEWABLE:
        return entry
    interval = entry.charging_interval
    if interval <= 0 or at < entry.period_start + interval:
        return entry
    periods = (at - entry.period_start) // interval
    return replace(
        entry,
        period_start=entry.period_start + periods * interval,
        units_used=0,
    )


def apply_usage(entry: QuotaLedgerEntry, units: int, at: int) -> QuotaLedgerEntry:
    """Consume ``units`` against the entry at time ``at``.

    All-or-nothing: QUOTA_EXCEEDED leaves the entry unchanged.
    """
    if units < 0:
        raise OperationError(QUOTA_EXCEEDED, "units must be non-negative")
    entry = renew_if_due(entry, at)
    if entry.units_used + units > entry.quota:
        raise OperationError(
            QUOTA_EXCEEDED,
            f"{entry.attribute}: {entry.units_used}+{units} exceeds quota {entry.quota}",
        )
    return replace(entry, units_used=entry.units_used + units)


def charge_for(metric: MetricDefinition, units_used: int) -> int:
    """Exact integer charge in currency minor units."""
    if units_used < 0:
        raise OperationError(OVERFLOW, "units_used must be non-negative")
    charge = units_used * metric.rate
    if charge > MAX_CHARGE:
        raise OperationError(OVERFLOW, f"charge {charge} exceeds {MAX_CHARGE}")
    return charge
