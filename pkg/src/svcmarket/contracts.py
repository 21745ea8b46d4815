"""The marketplace contract state machine.

All business state lives in one JSON-able document executed inside the
ledger's serial apply step: tenant and service accounts, the delegation
graph, quota counters, usage anchors, and bills. Every handler is a
deterministic function of (state, transaction); wall clocks, signing,
and network I/O stay outside (the API layer pre-signs any token a
transaction needs and execution only verifies).

Transactions are signed by a marketplace operator node, not by the
acting tenant or service; the acting account is carried in the
arguments and its intent is proven by embedded signed tokens where it
matters (resource offerings, grants, acceptances, usage digests).

Handlers validate fully before mutating, so a failed operation commits
as a failed receipt without touching anything but the sender's nonce.
"""

from __future__ import annotations

from . import resources, tokens
from .canonical import canonical_json, sha256_hex
from .errors import (
    ALREADY_EXISTS,
    ALREADY_PAID,
    BROKEN_CHAIN,
    CHARGE_MISMATCH,
    DUPLICATE_SUBSCRIPTION,
    GRANT_EXPIRED,
    INVALID_SIGNATURE,
    MALFORMED_CONTACT,
    MALFORMED_KEY,
    MALFORMED_REQUEST,
    NOT_FOUND,
    OperationError,
    QUOTA_EXCEEDED,
    UNAUTHORIZED_SENDER,
)
from .keys import is_valid_public_key, verify_signature
from .ledger.types import Transaction

CONTRACT_ID = "market"

GENESIS_DEFAULTS = {
    "max_delegation_depth": 1,
    "grant_lifetime_s": 600,
    "max_delegation_duration_s": 30 * 24 * 3600,
    "token_lifetime_s": 3600,
    "skew_window_s": 300,
}


def make_genesis(
    chain_id: str,
    timestamp: int,
    manager_public_key: str,
    operator_keys: list[str],
    **overrides,
) -> dict:
    genesis = {
        "chain_id": chain_id,
        "timestamp": timestamp,
        "manager_public_key": manager_public_key,
        "operator_keys": sorted(operator_keys),
        **GENESIS_DEFAULTS,
    }
    unknown = set(overrides) - set(GENESIS_DEFAULTS)
    if unknown:
        raise ValueError(f"unknown genesis overrides: {sorted(unknown)}")
    genesis.update(overrides)
    return genesis


def _need(args: dict, key: str, kind, allow_none: bool = False):
    if key not in args:
        raise OperationError(MALFORMED_REQUEST, f"missing argument {key!r}")
    value = args[key]
    if value is None and allow_none:
        return None
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise OperationError(MALFORMED_REQUEST, f"argument {key!r} has the wrong type")
    return value


def _nonneg(args: dict, key: str, allow_none: bool = False):
    value = _need(args, key, int, allow_none=allow_none)
    if value is not None and value < 0:
        raise OperationError(MALFORMED_REQUEST, f"argument {key!r} must be >= 0")
    return value


def _check_url(value: str, key: str) -> str:
    if not value.startswith(("http://", "https://")):
        raise OperationError(MALFORMED_REQUEST, f"{key} must be an http(s) URL")
    return value


def delegation_id_of(grantor: str, grantee: str, resource_name: str, tx_hash: str) -> str:
    return sha256_hex(canonical_json([grantor, grantee, resource_name, tx_hash]))


def bill_id_of(
    tenant: str, service: str, resource_name: str, period_start: int, period_end: int
) -> str:
    return sha256_hex(
        canonical_json([tenant, service, resource_name, period_start, period_end])
    )


class MarketExecutor:
    """Deterministic executor for the marketplace contract."""

    def init_state(self, genesis: dict) -> dict:
        for key in ("chain_id", "timestamp", "manager_public_key", "operator_keys"):
            if key not in genesis:
                raise ValueError(f"genesis missing {key!r}")
        config = dict(GENESIS_DEFAULTS)
        config.update(genesis)
        return {
            "config": config,
            "nonces": {},
            "tenants": {},
            "services": {},
            "delegations": {},
            "subscriptions": {},
            "roots": {},
            "quota": {},
            "anchors": {},
            "bills": {},
        }

    def execute(self, state: dict, tx: Transaction) -> dict:
        try:
            if tx.payload["contract"] != CONTRACT_ID:
                raise OperationError(NOT_FOUND, f"unknown contract {tx.payload['contract']!r}")
            handler = _HANDLERS.get(tx.payload["method"])
            if handler is None:
                raise OperationError(NOT_FOUND, f"unknown method {tx.payload['method']!r}")
            result = handler(state, tx)
            return {"ok": True, "error": None, "result": result}
        except OperationError as exc:
            return {"ok": False, "error": exc.to_dict(), "result": None}
        except Exception as exc:  # noqa: BLE001 - malformed args must not kill the node
            return {
                "ok": False,
                "error": {"code": MALFORMED_REQUEST, "message": f"{type(exc).__name__}: {exc}"},
                "result": None,
            }

    @staticmethod
    def execute_is_deterministic() -> bool:
        return True


def _require_operator(state: dict, tx: Transaction) -> None:
    if tx.sender not in state["config"]["operator_keys"]:
        raise OperationError(UNAUTHORIZED_SENDER, "sender is not a marketplace operator")


# -- tenants ---------------------------------------------------------------


def op_create_tenant(state: dict, tx: Transaction) -> dict:
    _require_operator(state, tx)
    args = tx.payload["args"]
    account = _need(args, "account", str)
    if not is_valid_public_key(account):
        raise OperationError(MALFORMED_KEY, "account is not a valid public key")
    for key in ("name", "email", "phone", "charging_credential"):
        if not _need(args, key, str):
            raise OperationError(MALFORMED_CONTACT, f"{key} must be non-empty")
    existing = state["tenants"].get(account)
    if existing is not None and existing["active"]:
        raise OperationError(ALREADY_EXISTS, "an active tenant holds this key")
    tenant = {
        "account_id": account,
        "name": args["name"],
        "email": args["email"],
        "phone": args["phone"],
        "charging_credential": args["charging_credential"],
        "created_at": tx.timestamp,
        "active": True,
        "deleted_at": None,
    }
    state["tenants"][account] = tenant
    return {"tenant": tenant}


def op_delete_tenant(state: dict, tx: Transaction) -> dict:
    _require_operator(state, tx)
    account = _need(tx.payload["args"], "account", str)
    tenant = state["tenants"].get(account)
    if tenant is None or not tenant["active"]:
        raise OperationError(NOT_FOUND, "no active tenant with this key")
    deleted = _delete_delegations(
        state,
        [
            d["delegation_id"]
            for d in state["delegations"].values()
            if d["status"] == "active" and d["depth"] > 0 and d["grantee"] == account
        ],
        tx.timestamp,
    )
    tenant["active"] = False
    tenant["deleted_at"] = tx.timestamp
    return {"tenant": tenant, "deleted_delegations": deleted}


# -- services ----------------------------------------------------------------


def op_create_service(state: dict, tx: Transaction) -> dict:
    _require_operator(state, tx)
    args = tx.payload["args"]
    account = _need(args, "account", str)
    if not is_valid_public_key(account):
        raise OperationError(MALFORMED_KEY, "account is not a valid public key")
    if not _need(args, "name", str):
        raise OperationError(MALFORMED_CONTACT, "name must be non-empty")
    callback_url = _check_url(_need(args, "callback_url", str), "callback_url")
    service_url = _check_url(_need(args, "service_url", str), "service_url")
    settlement_account = _need(args, "settlement_account", str)
    entries = _need(args, "resources", list)
    existing = state["services"].get(account)
    if existing is not None and existing["active"]:
        raise OperationError(ALREADY_EXISTS, "an active service holds this key")

    manager_key = state["config"]["manager_public_key"]
    parsed = []
    seen_names = set()
    for entry in entries:
        if not isinstance(entry, dict):
            raise OperationError(MALFORMED_REQUEST, "resources entries must be objects")
        token = _need(entry, "token", str)
        manager_token = _need(entry, "manager_token", str)
        claims = tokens.verify_document_token(token, account)
        rd = resources.validate_resource_value(claims["doc"])
        accept = tokens.verify_document_token(manager_token, manager_key)
        if accept["doc_sha256"] != claims["doc_sha256"]:
            raise OperationError(
                INVALID_SIGNATURE, "manager acceptance covers a different document"
            )
        if rd.name in seen_names:
            raise OperationError(ALREADY_EXISTS, f"duplicate resource name {rd.name!r}")
        seen_names.add(rd.name)
        parsed.append((rd, claims["doc"], token, manager_token))

    service = {
        "account_id": account,
        "name": args["name"],
        "callback_url": callback_url,
        "service_url": service_url,
        "settlement_account": settlement_account,
        "resources": {},
        "created_at": tx.timestamp,
        "active": True,
        "deleted_at": None,
    }
    state["services"][account] = service
    state["roots"][account] = {}
    roots = []
    for rd, doc, token, manager_token in parsed:
        delegation_id = delegation_id_of(account, manager_key, rd.name, tx.tx_hash)
        root = {
            "delegation_id": delegation_id,
            "grantor": account,
            "grantee": manager_key,
            "service": account,
            "resource_name": rd.name,
            "grantor_token": token,
            "grantee_token": manager_token,
            "parent": None,
            "depth": 0,
            "allowed_subdelegations": state["config"]["max_delegation_depth"],
            "expires_at": None,
            "status": "active",
            "created_at": tx.timestamp,
            "deleted_at": None,
        }
        state["delegations"][delegation_id] = root
        state["roots"][account][rd.name] = delegation_id
        service["resources"][rd.name] = {"token": token, "document": doc}
        roots.append(root)
    return {"service": service, "root_delegations": roots}


def op_delete_service(state: dict, tx: Transaction) -> dict:
    _require_operator(state, tx)
    account = _need(tx.payload["args"], "account", str)
    service = state["services"].get(account)
    if service is None or not service["active"]:
        raise OperationError(NOT_FOUND, "no active service with this key")
    doomed = [
        d["delegation_id"]
        for d in state["delegations"].values()
        if d["status"] == "active" and d["service"] == account
    ]
    deleted = _delete_delegations(state, doomed, tx.timestamp)
    service["active"] = False
    service["deleted_at"] = tx.timestamp
    state["roots"].pop(account, None)
    return {"service": service, "deleted_delegations": deleted}


# -- delegations ---------------------------------------------------------------


def op_create_delegation(state: dict, tx: Transaction) -> dict:
    _require_operator(state, tx)
    args = tx.payload["args"]
    service_id = _need(args, "service", str)
    tenant_id = _need(args, "tenant", str)
    resource_name = _need(args, "resource_name", str)
    grant_token = _need(args, "grant_token", str)
    acceptance_token = _need(args, "acceptance_token", str)
    duration_s = _nonneg(args, "duration_s", allow_none=True)
    subdelegations = _nonneg(args, "subdelegations")

    service = state["services"].get(service_id)
    if service is None or not service["active"]:
        raise OperationError(NOT_FOUND, "no active service with this key")
    tenant = state["tenants"].get(tenant_id)
    if tenant is None or not tenant["active"]:
        raise OperationError(NOT_FOUND, "no active tenant with this key")
    resource = service["resources"].get(resource_name)
    if resource is None:
        raise OperationError(NOT_FOUND, f"service offers no resource {resource_name!r}")

    manager_key = state["config"]["manager_public_key"]
    grant = tokens.verify_token(grant_token, manager_key)
    for key in ("service", "sub", "resource", "exp", "max_duration_s", "allowed_subdelegations"):
        if key not in grant:
            raise OperationError(INVALID_SIGNATURE, f"grant token lacks claim {key!r}")
    for key in ("exp", "max_duration_s", "allowed_subdelegations"):
        if not isinstance(grant[key], int) or isinstance(grant[key], bool) or grant[key] < 0:
            raise OperationError(INVALID_SIGNATURE, f"grant claim {key!r} must be an integer")
    if (
        grant["service"] != service_id
        or grant["sub"] != tenant_id
        or grant["resource"] != resource_name
    ):
        raise OperationError(INVALID_SIGNATURE, "grant token binds different parties")
    if tx.timestamp >= grant["exp"]:
        raise OperationError(GRANT_EXPIRED, "grant token has expired")

    acceptance = tokens.verify_document_token(acceptance_token, tenant_id)
    current_digest = sha256_hex(canonical_json(resource["document"]))
    if acceptance["doc_sha256"] != current_digest:
        raise OperationError(
            INVALID_SIGNATURE, "acceptance covers a different resource document"
        )

    active = state["subscriptions"].get(tenant_id, {}).get(service_id, {}).get(resource_name)
    if active is not None:
        raise OperationError(
            DUPLICATE_SUBSCRIPTION, "tenant already subscribes to this resource"
        )

    parent_id = state["roots"].get(service_id, {}).get(resource_name)
    parent = state["delegations"].get(parent_id) if parent_id else None
    if parent is None or parent["status"] != "active":
        raise OperationError(BROKEN_CHAIN, "service has no active root delegation")

    # requested terms are capped by what the grant actually authorizes
    if duration_s is None:
        effective_duration = grant["max_duration_s"]
    else:
        effective_duration = min(duration_s, grant["max_duration_s"])
    effective_subdelegations = min(subdelegations, grant["allowed_subdelegations"])
    depth = parent["depth"] + 1
    if depth > state["config"]["max_delegation_depth"]:
        raise OperationError(BROKEN_CHAIN, "delegation depth limit exceeded")

    rd = resources.validate_resource_value(resource["document"])
    delegation_id = delegation_id_of(manager_key, tenant_id, resource_name, tx.tx_hash)
    delegation = {
        "delegation_id": delegation_id,
        "grantor": manager_key,
        "grantee": tenant_id,
        "service": service_id,
        "resource_name": resource_name,
        "grantor_token": grant_token,
        "grantee_token": acceptance_token,
        "parent": parent_id,
        "depth": depth,
        "allowed_subdelegations": effective_subdelegations,
        "expires_at": None if effective_duration is None else tx.timestamp + effective_duration,
        "status": "active",
        "created_at": tx.timestamp,
        "deleted_at": None,
    }
    state["delegations"][delegation_id] = delegation
    state["subscriptions"].setdefault(tenant_id, {}).setdefault(service_id, {})[
        resource_name
    ] = delegation_id
    entries = {}
    for attr in rd.renewable_quota_attributes:
        entries[attr.name] = resources.QuotaLedgerEntry(
            delegation_id=delegation_id,
            attribute=attr.name,
            kind=resources.KIND_RENEWABLE,
            quota=attr.quota,
            units_used=0,
            period_start=tx.timestamp,
            charging_interval=rd.charging_interval,
        ).to_dict()
    for attr in rd.nonrenewable_quota_attributes:
        entries[attr.name] = resources.QuotaLedgerEntry(
            delegation_id=delegation_id,
            attribute=attr.name,
            kind=resources.KIND_NONRENEWABLE,
            quota=attr.quota,
            units_used=0,
            period_start=tx.timestamp,
            charging_interval=rd.charging_interval,
        ).to_dict()
    state["quota"][delegation_id] = entries
    return {"delegation": delegation}


def op_delete_delegation(state: dict, tx: Transaction) -> dict:
    _require_operator(state, tx)
    args = tx.payload["args"]
    service_id = _need(args, "service", str)
    tenant_id = _need(args, "tenant", str)
    resource_name = _need(args, "resource_name", str)
    delegation_id = (
        state["subscriptions"].get(tenant_id, {}).get(service_id, {}).get(resource_name)
    )
    if delegation_id is None:
        raise OperationError(NOT_FOUND, "no active delegation for this triple")
    deleted = _delete_delegations(state, [delegation_id], tx.timestamp)
    return {"delegation": state["delegations"][delegation_id], "deleted_delegations": deleted}


def _delete_delegations(state: dict, delegation_ids: list[str], at: int) -> list[dict]:
    """Mark delegations deleted and drop them from the active indexes.

    Returns summaries the API layer uses to issue unsubscribe callbacks
    and final bills after the commit.
    """
    summaries = []
    for delegation_id in delegation_ids:
        d = state["delegations"][delegation_id]
        if d["status"] != "active":
            continue
        d["status"] = "deleted"
        d["deleted_at"] = at
        if d["depth"] == 0:
            roots = state["roots"].get(d["service"])
            if roots and roots.get(d["resource_name"]) == delegation_id:
                del roots[d["resource_name"]]
        else:
            subs = state["subscriptions"].get(d["grantee"], {})
            per_service = subs.get(d["service"], {})
            if per_service.get(d["resource_name"]) == delegation_id:
                del per_service[d["resource_name"]]
                if not per_service:
                    del subs[d["service"]]
                if not subs:
                    del state["subscriptions"][d["grantee"]]
        summaries.append(
            {
                "delegation_id": delegation_id,
                "tenant": d["grantee"] if d["depth"] > 0 else None,
                "service": d["service"],
                "resource_name": d["resource_name"],
                "depth": d["depth"],
                "deleted_at": at,
            }
        )
    return summaries


# -- usage, anchors, bills -------------------------------------------------------


def op_record_quota(state: dict, tx: Transaction) -> dict:
    _require_operator(state, tx)
    args = tx.payload["args"]
    service_id = _need(args, "service", str)
    records = _need(args, "records", list)
    service = state["services"].get(service_id)
    if service is None or not service["active"]:
        raise OperationError(NOT_FOUND, "no active service with this key")
    # validate everything against copies, then commit all updates at once
    staged: dict[tuple[str, str], dict] = {}
    for i, record in enumerate(records):
        if not isinstance(record, dict):
            raise OperationError(MALFORMED_REQUEST, f"records[{i}] must be an object")
        tenant_id = _need(record, "tenant", str)
        resource_name = _need(record, "resource_name", str)
        attr = _need(record, "quota_attribute", str)
        units = _nonneg(record, "unitsUsed")
        delegation_id = (
            state["subscriptions"].get(tenant_id, {}).get(service_id, {}).get(resource_name)
        )
        if delegation_id is None:
            raise OperationError(NOT_FOUND, f"records[{i}]: no active delegation")
        entries = state["quota"].get(delegation_id, {})
        key = (delegation_id, attr)
        entry_dict = staged.get(key) or entries.get(attr)
        if entry_dict is None:
            raise OperationError(NOT_FOUND, f"records[{i}]: no quota attribute {attr!r}")
        entry = resources.QuotaLedgerEntry.from_dict(entry_dict)
        if "quota" in record and record["quota"] != entry.quota:
            raise OperationError(
                MALFORMED_REQUEST, f"records[{i}]: quota does not match the resource"
            )
        staged[key] = resources.apply_usage(entry, units, at=tx.timestamp).to_dict()
    for (delegation_id, attr), entry_dict in staged.items():
        state["quota"][delegation_id][attr] = entry_dict
    return {"updated": len(staged)}


def op_record_anchor(state: dict, tx: Transaction) -> dict:
    _require_operator(state, tx)
    args = tx.payload["args"]
    service_id = _need(args, "service", str)
    batch_id = _need(args, "batch_id", str)
    batch_digest = _need(args, "digest", str)
    signature = _need(args, "signature", str)
    service = state["services"].get(service_id)
    if service is None or not service["active"]:
        raise OperationError(NOT_FOUND, "no active service with this key")
    if not verify_signature(service_id, batch_digest.encode(), signature):
        raise OperationError(INVALID_SIGNATURE, "digest signature does not verify")
    existing = state["anchors"].get(batch_id)
    if existing is not None:
        if existing["digest"] == batch_digest:
            return {"anchor": existing, "duplicate": True}
        raise OperationError(ALREADY_EXISTS, "batch anchored with a different digest")
    anchor = {
        "batch_id": batch_id,
        "service": service_id,
        "digest": batch_digest,
        "signature": signature,
        "tx_hash": tx.tx_hash,
        "anchored_at": tx.timestamp,
    }
    state["anchors"][batch_id] = anchor
    return {"anchor": anchor, "duplicate": False}


def op_record_bills(state: dict, tx: Transaction) -> dict:
    _require_operator(state, tx)
    bills = _need(tx.payload["args"], "bills", list)
    accepted = []
    staged = []
    for i, bill in enumerate(bills):
        if not isinstance(bill, dict):
            raise OperationError(MALFORMED_REQUEST, f"bills[{i}] must be an object")
        for key in (
            "bill_id",
            "tenant",
            "service",
            "resource_name",
            "delegation_id",
            "period_start",
            "period_end",
            "line_items",
            "total",
            "currency",
        ):
            if key not in bill:
                raise OperationError(MALFORMED_REQUEST, f"bills[{i}] missing {key!r}")
        expected_id = bill_id_of(
            bill["tenant"],
            bill["service"],
            bill["resource_name"],
            bill["period_start"],
            bill["period_end"],
        )
        if bill["bill_id"] != expected_id:
            raise OperationError(MALFORMED_REQUEST, f"bills[{i}]: bill_id mismatch")
        if bill["delegation_id"] not in state["delegations"]:
            raise OperationError(NOT_FOUND, f"bills[{i}]: unknown delegation")
        total = 0
        for item in bill["line_items"]:
            if item["charge"] != item["unitsUsed"] * item["rate"]:
                raise OperationError(
                    CHARGE_MISMATCH,
                    f"bills[{i}]: {item['metric']}: {item['charge']} != "
                    f"{item['unitsUsed']} x {item['rate']}",
                )
            total += item["charge"]
        if total != bill["total"]:
            raise OperationError(CHARGE_MISMATCH, f"bills[{i}]: total mismatch")
        if bill["bill_id"] in state["bills"]:
            continue  # idempotent per (delegation, period)
        staged.append(
            {
                "bill_id": bill["bill_id"],
                "tenant": bill["tenant"],
                "service": bill["service"],
                "resource_name": bill["resource_name"],
                "delegation_id": bill["delegation_id"],
                "period_start": bill["period_start"],
                "period_end": bill["period_end"],
                "line_items": bill["line_items"],
                "total": bill["total"],
                "currency": bill["currency"],
                "status": "unpaid",
                "payment_ref": None,
                "issued_at": tx.timestamp,
            }
        )
    for doc in staged:
        state["bills"][doc["bill_id"]] = doc
        accepted.append(doc["bill_id"])
    return {"accepted": accepted}


def op_mark_paid(state: dict, tx: Transaction) -> dict:
    _require_operator(state, tx)
    args = tx.payload["args"]
    bill_id = _need(args, "bill_id", str)
    payment_ref = _need(args, "payment_ref", str)
    bill = state["bills"].get(bill_id)
    if bill is None:
        raise OperationError(NOT_FOUND, "unknown bill")
    if bill["status"] == "paid":
        raise OperationError(ALREADY_PAID, "bill is already paid")
    bill["status"] = "paid"
    bill["payment_ref"] = payment_ref
    bill["paid_at"] = tx.timestamp
    return {"bill": bill}


def op_noop(state: dict, tx: Transaction) -> dict:
    """Consumes the sender's nonce without touching state.

    Submitted when a reserved transaction slot must be released, e.g.
    after a rejected subscribe callback whose prepared transaction was
    never sent.
    """
    return {}


_HANDLERS = {
    "create_tenant": op_create_tenant,
    "delete_tenant": op_delete_tenant,
    "create_service": op_create_service,
    "delete_service": op_delete_service,
    "create_delegation": op_create_delegation,
    "delete_delegation": op_delete_delegation,
    "record_quota": op_record_quota,
    "record_anchor": op_record_anchor,
    "record_bills": op_record_bills,
    "mark_paid": op_mark_paid,
    "noop": op_noop,
}


# -- read-side queries (run against committed state snapshots) --------------------


def get_tenant(state: dict, account: str) -> dict:
    tenant = state["tenants"].get(account)
    if tenant is None or not tenant["active"]:
        raise OperationError(NOT_FOUND, "no active tenant with this key")
    return tenant


def get_service(state: dict, account: str) -> dict:
    service = state["services"].get(account)
    if service is None or not service["active"]:
        raise OperationError(NOT_FOUND, "no active service with this key")
    return service


def list_services(state: dict, offset: int = 0, limit: int | None = None) -> list[dict]:
    active = [s for s in state["services"].values() if s["active"]]
    active.sort(key=lambda s: (s["created_at"], s["account_id"]))
    if limit is None:
        return active[offset:]
    return active[offset : offset + limit]


def list_delegations(state: dict, tenant: str) -> list[dict]:
    return [
        d
        for d in state["delegations"].values()
        if d["status"] == "active" and d["depth"] > 0 and d["grantee"] == tenant
    ]


def get_delegation(state: dict, delegation_id: str) -> dict:
    d = state["delegations"].get(delegation_id)
    if d is None:
        raise OperationError(NOT_FOUND, "unknown delegation")
    return d


def trace_chain(state: dict, delegation_id: str) -> list[dict]:
    """Walk leaf to root, re-verifying every link and token signature."""
    chain = []
    current = state["delegations"].get(delegation_id)
    if current is None:
        raise OperationError(NOT_FOUND, "unknown delegation")
    seen = set()
    while True:
        if current["delegation_id"] in seen:
            raise OperationError(BROKEN_CHAIN, "delegation parent cycle")
        seen.add(current["delegation_id"])
        _verify_link_tokens(state, current)
        chain.append(current)
        if current["parent"] is None:
            if current["depth"] != 0:
                raise OperationError(BROKEN_CHAIN, "chain head is not a depth-0 root")
            return chain
        parent = state["delegations"].get(current["parent"])
        if parent is None:
            raise OperationError(BROKEN_CHAIN, "missing parent delegation")
        if parent["depth"] != current["depth"] - 1:
            raise OperationError(BROKEN_CHAIN, "parent depth is not one less")
        if parent["grantee"] != current["grantor"]:
            raise OperationError(BROKEN_CHAIN, "grantor is not the parent's grantee")
        if parent["service"] != current["service"] or (
            parent["resource_name"] != current["resource_name"]
        ):
            raise OperationError(BROKEN_CHAIN, "parent covers a different resource")
        current = parent


def _verify_link_tokens(state: dict, delegation: dict) -> None:
    try:
        tokens.verify_token(delegation["grantor_token"], delegation["grantor"])
        tokens.verify_token(delegation["grantee_token"], delegation["grantee"])
    except OperationError as exc:
        raise OperationError(
            BROKEN_CHAIN, f"token verification failed: {exc.message}"
        ) from exc


def query_quota(state: dict, tenant: str, service: str, resource_name: str, now: int) -> list[dict]:
    """Current quota standing in the reporting record format."""
    delegation_id = (
        state["subscriptions"].get(tenant, {}).get(service, {}).get(resource_name)
    )
    if delegation_id is None:
        raise OperationError(NOT_FOUND, "no active delegation for this triple")
    service_doc = state["services"][service]
    rd = resources.validate_resource_value(service_doc["resources"][resource_name]["document"])
    units = {}
    for attr, entry_dict in state["quota"][delegation_id].items():
        entry = resources.renew_if_due(resources.QuotaLedgerEntry.from_dict(entry_dict), now)
        units[attr] = entry.units_used
    reports = []
    for attr in list(rd.renewable_quota_attributes) + list(rd.nonrenewable_quota_attributes):
        reports.append(
            {
                "service": service,
                "tenant": tenant,
                "resource_name": resource_name,
                "quota_attribute": attr.name,
                "unit": attr.unit,
                "unitsUsed": units.get(attr.name, 0),
                "quota": attr.quota,
            }
        )
    return reports


def active_subscription(state: dict, tenant: str, service: str, resource_name: str) -> str | None:
    return state["subscriptions"].get(tenant, {}).get(service, {}).get(resource_name)


def list_bills(
    state: dict,
    tenant: str | None = None,
    service: str | None = None,
    resource_name: str | None = None,
    bill_id: str | None = None,
    paid: bool | None = None,
    period_start: int | None = None,
    period_end: int | None = None,
) -> list[dict]:
    out = []
    for bill in state["bills"].values():
        if tenant is not None and bill["tenant"] != tenant:
            continue
        if service is not None and bill["service"] != service:
            continue
        if resource_name is not None and bill["resource_name"] != resource_name:
            continue
        if bill_id is not None and bill["bill_id"] != bill_id:
            continue
        if paid is not None and (bill["status"] == "paid") != paid:
            continue
        if period_start is not None and bill["period_end"] <= period_start:
            continue
        if period_end is not None and bill["period_start"] >= period_end:
            continue
        out.append(bill)
    out.sort(key=lambda b: (b["period_start"], b["bill_id"]))
    return out
