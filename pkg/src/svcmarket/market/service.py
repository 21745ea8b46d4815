"""Marketplace orchestration: the layer between HTTP and the ledger.

Every node of the cluster runs one of these. It validates requests
against tokens and the committed state, performs the I/O the
deterministic contract layer cannot (signing, subscribe/unsubscribe
callbacks, the usage store, settlement listening), and turns approved
mutations into operator-signed ledger transactions.

Transaction plumbing rules this layer enforces:
  - each node signs with its own operator key and allocates that key's
    nonces locally, so nodes never contend on a nonce sequence;
  - a nonce reserved for a transaction that is later abandoned (e.g. a
    rejected subscribe callback) is consumed by a no-op transaction,
    keeping the committed sequence gapless;
  - submitted transactions are tracked until they commit and resubmitted
    by a janitor thread, which is safe because the ledger deduplicates
    by transaction hash.

Deterministic request failures are detected here, before any
transaction is submitted, so repeating a failed request never grows the
ledger.
"""

from __future__ import annotations

import copy
import threading
import time

import requests as _requests

from .. import billing, contracts, tokens
from ..canonical import canonical_json, sha256_hex
from ..errors import (
    ALREADY_EXISTS,
    ALREADY_PAID,
    CALLBACK_REJECTED,
    CALLBACK_TIMEOUT,
    DUPLICATE_SUBSCRIPTION,
    DURATION_EXCEEDED,
    GRANT_EXPIRED,
    INVALID_SIGNATURE,
    MALFORMED_CONTACT,
    MALFORMED_KEY,
    MALFORMED_REQUEST,
    MALFORMED_TOKEN,
    NO_LEADER,
    NOT_FOUND,
    ROLE_MISMATCH,
    STALE_NONCE,
    OperationError,
)
from ..keys import KeyPair, is_valid_public_key, verify_signature
from ..ledger import LedgerNode, Transaction, make_transaction
from ..resources import QuotaLedgerEntry, apply_usage, validate_resource_value
from ..usage import UsageStore, records_digest

ROLE_TENANT = "tenant"
ROLE_SERVICE = "service"


def _need(body: dict, key: str, kind=str):
    if not isinstance(body, dict) or key not in body:
        raise OperationError(MALFORMED_REQUEST, f"missing field {key!r}")
    value = body[key]
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise OperationError(MALFORMED_REQUEST, f"field {key!r} has the wrong type")
    return value


def _opt_int(body: dict, key: str) -> int | None:
    value = body.get(key)
    if value is None:
        return None
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise OperationError(MALFORMED_REQUEST, f"field {key!r} must be a non-negative integer")
    return value


class MarketplaceService:
    def __init__(
        self,
        node: LedgerNode,
        store: UsageStore,
        settlement,
        operator: KeyPair,
        manager: KeyPair,
        *,
        clock=time.time,
        callback_timeout_s: float = 5.0,
        unsubscribe_retries: int = 3,
        commit_timeout_s: float = 15.0,
        billing_interval_s: float = 0.0,
    ):
        self.node = node
        self.store = store
        self.settlement = settlement
        self.operator = operator
        self.manager = manager
        self.clock = clock
        self.callback_timeout_s = callback_timeout_s
        self.unsubscribe_retries = unsubscribe_retries
        self.commit_timeout_s = commit_timeout_s
        self.billing_interval_s = billing_interval_s
        self.config = node.with_state(lambda s: dict(s["config"]))

        self._nonce_lock = threading.Lock()
        self._last_nonce = 0
        self._nonce_primed = False

        self._tracked_lock = threading.Lock()
        self._tracked: dict[str, dict] = {}

        self._inflight_lock = threading.Lock()
        self._inflight_subscriptions: set[tuple[str, str, str]] = set()

        self._armed_lock = threading.Lock()
        self._armed_payments: dict[str, dict] = {}
        self._settlement_handle = None

        self._running = True
        self._threads: list[threading.Thread] = []

    # -- lifecycle -------------------------------------------------------------

    def start(self) -> None:
        self._settlement_handle = self.settlement.subscribe(self._on_settlement_event)
        self._spawn(self._janitor_loop, "mkt-janitor")
        if self.billing_interval_s > 0:
            self._spawn(self._billing_loop, "mkt-billing")

    def stop(self) -> None:
        self._running = False
        if self._settlement_handle is not None:
            try:
                self.settlement.unsubscribe(self._settlement_handle)
            except Exception:
                pass
        for t in self._threads:
            t.join(timeout=2)

    def _spawn(self, target, name: str) -> None:
        t = threading.Thread(target=target, name=name, daemon=True)
        t.start()
        self._threads.append(t)

    def now(self) -> int:
        return int(self.clock())

    # -- transaction plumbing ----------------------------------------------------

    def _alloc_nonce(self) -> int:
        with self._nonce_lock:
            if not self._nonce_primed:
                self._last_nonce = self.node.reserved_nonce_floor(self.operator.account_id)
                self._nonce_primed = True
            floor = self.node.reserved_nonce_floor(self.operator.account_id)
            self._last_nonce = max(self._last_nonce, floor) + 1
            return self._last_nonce

    def _make_tx(self, method: str, args: dict, nonce: int | None = None) -> Transaction:
        payload = {"contract": contracts.CONTRACT_ID, "method": method, "args": args}
        return make_transaction(
            self.operator, payload, nonce if nonce is not None else self._alloc_nonce(), self.now()
        )

    def _track(self, tx: Transaction) -> None:
        with self._tracked_lock:
            self._tracked[tx.tx_hash] = tx.to_dict()

    def _untrack(self, tx_hash: str) -> None:
        with self._tracked_lock:
            self._tracked.pop(tx_hash, None)

    def _commit(self, tx: Transaction) -> dict:
        """Submit and wait; tracked until terminal so a commit-timeout
        still resolves eventually (clients retry on 503)."""
        self._track(tx)
        try:
            receipt = self.node.submit_and_wait(tx, timeout_s=self.commit_timeout_s)
        except OperationError:
            raise  # stays tracked; the janitor keeps pushing it
        self._untrack(tx.tx_hash)
        if not receipt.get("ok"):
            error = receipt.get("error") or {}
            raise OperationError(
                error.get("code", MALFORMED_REQUEST), error.get("message", "operation failed")
            )
        return receipt

    def _fill_nonce_gap(self, nonce: int) -> None:
        """Consume an abandoned nonce so later transactions can execute."""
        tx = self._make_tx("noop", {"reason": "released reservation"}, nonce=nonce)
        self._track(tx)
        try:
            self.node.submit_transaction(tx)
        except OperationError:
            pass  # janitor retries

    def _janitor_loop(self) -> None:
        while self._running:
            time.sleep(0.5)
            with self._tracked_lock:
                pending = list(self._tracked.items())
            for tx_hash, tx_dict in pending:
                try:
                    receipt = self.node.get_receipt(tx_hash)
                    if receipt.get("status") == "committed":
                        self._untrack(tx_hash)
                    continue
                except OperationError:
                    pass  # unknown here: resubmit below
                try:
                    self.node.submit_transaction(tx_dict)
                except OperationError as exc:
                    if exc.code == STALE_NONCE:
                        self._untrack(tx_hash)

    def _snapshot(self, fn):
        return self.node.with_state(lambda s: copy.deepcopy(fn(s)))

    # -- auth ---------------------------------------------------------------------

    def auth_claims(self, token: str | None, required_role: str | None = None) -> dict:
        if not token:
            raise OperationError(INVALID_SIGNATURE, "missing bearer token")
        return tokens.validate_auth_token(
            token, self.manager.account_id, self.now(), required_role
        )

    def authenticate(self, body: dict) -> dict:
        account = _need(body, "account")
        role = _need(body, "role")
        assertion = _need(body, "assertion")
        if role not in (ROLE_TENANT, ROLE_SERVICE):
            raise OperationError(MALFORMED_REQUEST, "role must be tenant or service")
        registry = "tenants" if role == ROLE_TENANT else "services"
        other = "services" if role == ROLE_TENANT else "tenants"
        found, found_other = self.node.with_state(
            lambda s: (
                bool(s[registry].get(account, {}).get("active")),
                bool(s[other].get(account, {}).get("active")),
            )
        )
        if not found:
            if found_other:
                raise OperationError(ROLE_MISMATCH, "account is registered under a different role")
            raise OperationError(NOT_FOUND, "no active account with this key")
        tokens.verify_assertion(
            assertion, account, role, self.now(), self.config["skew_window_s"]
        )
        now = self.now()
        token = tokens.issue_auth_token(
            self.manager, account, role, now, self.config["token_lifetime_s"]
        )
        return {
            "token": token,
            "sub": account,
            "role": role,
            "iat": now,
            "exp": now + self.config["token_lifetime_s"],
        }

    def _bootstrap_identity(self, body: dict, role: str, token: str | None) -> str:
        """Resolve the acting account for registration endpoints.

        Registration happens before an account can authenticate, so a
        self-signed timestamp assertion proves key possession; an
        ordinary auth token is accepted too.
        """
        account = _need(body, "account")
        if not is_valid_public_key(account):
            raise OperationError(MALFORMED_KEY, "account is not a valid public key")
        if token:
            claims = self.auth_claims(token, role)
            if claims["sub"] != account:
                raise OperationError(ROLE_MISMATCH, "token subject differs from account")
            return account
        assertion = _need(body, "assertion")
        tokens.verify_assertion(assertion, account, role, self.now(), self.config["skew_window_s"])
        return account

    # -- tenants --------------------------------------------------------------------

    def create_tenant(self, body: dict, token: str | None = None) -> dict:
        account = self._bootstrap_identity(body, ROLE_TENANT, token)
        for key in ("name", "email", "phone", "charging_credential"):
            if not _need(body, key):
                raise OperationError(MALFORMED_CONTACT, f"{key} must be non-empty")
        exists = self.node.with_state(
            lambda s: bool(s["tenants"].get(account, {}).get("active"))
        )
        if exists:
            raise OperationError(ALREADY_EXISTS, "an active tenant holds this key")
        args = {
            "account": account,
            "name": body["name"],
            "email": body["email"],
            "phone": body["phone"],
            "charging_credential": body["charging_credential"],
        }
        receipt = self._commit(self._make_tx("create_tenant", args))
        return receipt["result"]["tenant"]

    def get_tenant(self, account: str, token: str | None) -> dict:
        claims = self.auth_claims(token, ROLE_TENANT)
        if claims["sub"] != account:
            raise OperationError(ROLE_MISMATCH, "tenants may only read their own contract")
        return self._snapshot(lambda s: contracts.get_tenant(s, account))

    def delete_tenant(self, account: str, token: str | None) -> dict:
        claims = self.auth_claims(token, ROLE_TENANT)
        if claims["sub"] != account:
            raise OperationError(ROLE_MISMATCH, "tenants may only delete their own contract")
        exists = self.node.with_state(
            lambda s: bool(s["tenants"].get(account, {}).get("active"))
        )
        if not exists:
            raise OperationError(NOT_FOUND, "no active tenant with this key")
        receipt = self._commit(self._make_tx("delete_tenant", {"account": account}))
        summaries = receipt["result"]["deleted_delegations"]
        self._notify_unsubscribes(summaries)
        return {"tenant": receipt["result"]["tenant"], "unsubscribed": len(summaries)}

    # -- services ---------------------------------------------------------------------

    def create_service(self, body: dict, token: str | None = None) -> dict:
        account = self._bootstrap_identity(body, ROLE_SERVICE, token)
        if not _need(body, "name"):
            raise OperationError(MALFORMED_CONTACT, "name must be non-empty")
        for key in ("callback_url", "service_url"):
            if not _need(body, key).startswith(("http://", "https://")):
                raise OperationError(MALFORMED_REQUEST, f"{key} must be an http(s) URL")
        _need(body, "settlement_account")
        entries = _need(body, "resources", list)
        exists = self.node.with_state(
            lambda s: bool(s["services"].get(account, {}).get("active"))
        )
        if exists:
            raise OperationError(ALREADY_EXISTS, "an active service holds this key")
        resource_args = []
        seen = set()
        for entry in entries:
            resource_token = _need(entry, "token")
            claims = tokens.verify_document_token(resource_token, account)
            rd = validate_resource_value(claims["doc"])
            if rd.name in seen:
                raise OperationError(ALREADY_EXISTS, f"duplicate resource name {rd.name!r}")
            seen.add(rd.name)
            # the marketplace co-signs each offered document: its token
            # anchors the root delegation's grantee side
            manager_token = tokens.sign_document(self.manager, claims["doc"])
            resource_args.append({"token": resource_token, "manager_token": manager_token})
        args = {
            "account": account,
            "name": body["name"],
            "callback_url": body["callback_url"],
            "service_url": body["service_url"],
            "settlement_account": body["settlement_account"],
            "resources": resource_args,
        }
        receipt = self._commit(self._make_tx("create_service", args))
        return receipt["result"]

    def delete_service(self, account: str, token: str | None) -> dict:
        claims = self.auth_claims(token, ROLE_SERVICE)
        if claims["sub"] != account:
            raise OperationError(ROLE_MISMATCH, "services may only delete their own registration")
        exists = self.node.with_state(
            lambda s: bool(s["services"].get(account, {}).get("active"))
        )
        if not exists:
            raise OperationError(NOT_FOUND, "no active service with this key")
        receipt = self._commit(self._make_tx("delete_service", {"account": account}))
        summaries = receipt["result"]["deleted_delegations"]
        self._notify_unsubscribes(summaries)
        self.run_billing_once()
        return {"service": receipt["result"]["service"], "unsubscribed": len(summaries)}

    def list_services(self, offset: int = 0, limit: int | None = None) -> list[dict]:
        return self._snapshot(lambda s: contracts.list_services(s, offset, limit))

    def get_service(self, account: str) -> dict:
        return self._snapshot(lambda s: contracts.get_service(s, account))

    # -- grants ------------------------------------------------------------------------

    def create_grant(self, body: dict, token: str | None) -> dict:
        claims = self.auth_claims(token, ROLE_TENANT)
        tenant = claims["sub"]
        service_id = _need(body, "service")
        resource_name = _need(body, "resource")
        requested_duration = _opt_int(body, "duration_s")
        requested_subdelegations = _opt_int(body, "subdelegations") or 0

        def read(s):
            service = s["services"].get(service_id)
            if service is None or not service["active"]:
                raise OperationError(NOT_FOUND, "no active service with this key")
            resource = service["resources"].get(resource_name)
            if resource is None:
                raise OperationError(NOT_FOUND, f"service offers no resource {resource_name!r}")
            tenant_doc = s["tenants"].get(tenant)
            if tenant_doc is None or not tenant_doc["active"]:
                raise OperationError(NOT_FOUND, "no active tenant with this key")
            return resource["document"]

        document = self._snapshot(read)
        max_duration = self.config["max_delegation_duration_s"]
        if requested_duration is not None and requested_duration > max_duration:
            raise OperationError(
                DURATION_EXCEEDED, f"requested duration exceeds the maximum of {max_duration}s"
            )
        # a leaf delegation sits at the depth limit already, so grants
        # clamp subdelegation rights to whatever headroom remains
        headroom = max(self.config["max_delegation_depth"] - 1, 0)
        allowed = min(requested_subdelegations, headroom)
        now = self.now()
        grant_claims = {
            "service": service_id,
            "sub": tenant,
            "resource": resource_name,
            "iat": now,
            "exp": now + self.config["grant_lifetime_s"],
            "max_duration_s": max_duration if requested_duration is None else requested_duration,
            "allowed_subdelegations": allowed,
            "requested_subdelegations": requested_subdelegations,
        }
        return {
            "grant_token": tokens.sign_token(self.manager, grant_claims),
            "claims": grant_claims,
            "resource_document": document,
        }

    # -- delegations -------------------------------------------------------------------

    def create_delegation(self, body: dict, token: str | None) -> dict:
        claims = self.auth_claims(token, ROLE_TENANT)
        tenant = claims["sub"]
        grant_token = _need(body, "grant_token")
        acceptance_token = _need(body, "acceptance_token")
        duration_s = _opt_int(body, "duration_s")
        subdelegations = _opt_int(body, "subdelegations") or 0

        # the grant token names the target; the tenant never repeats it
        grant = tokens.verify_token(grant_token, self.manager.account_id)
        service_id = grant.get("service")
        resource_name = grant.get("resource")
        if not isinstance(service_id, str) or not isinstance(resource_name, str):
            raise OperationError(MALFORMED_TOKEN, "grant token names no service resource")
        if grant.get("sub") != tenant:
            raise OperationError(INVALID_SIGNATURE, "grant token binds a different tenant")
        if not isinstance(grant.get("exp"), int) or self.now() >= grant["exp"]:
            raise OperationError(GRANT_EXPIRED, "grant token has expired")

        def read(s):
            service = s["services"].get(service_id)
            if service is None or not service["active"]:
                raise OperationError(NOT_FOUND, "no active service with this key")
            resource = service["resources"].get(resource_name)
            if resource is None:
                raise OperationError(NOT_FOUND, f"service offers no resource {resource_name!r}")
            tenant_doc = s["tenants"].get(tenant)
            if tenant_doc is None or not tenant_doc["active"]:
                raise OperationError(NOT_FOUND, "no active tenant with this key")
            duplicate = contracts.active_subscription(s, tenant, service_id, resource_name)
            return service["callback_url"], resource["document"], duplicate

        callback_url, document, duplicate = self._snapshot(read)
        if duplicate is not None:
            raise OperationError(DUPLICATE_SUBSCRIPTION, "tenant already subscribes to this resource")
        acceptance = tokens.verify_document_token(acceptance_token, tenant)
        if acceptance["doc_sha256"] != sha256_hex(canonical_json(document)):
            raise OperationError(INVALID_SIGNATURE, "acceptance covers a different resource document")

        reservation = (tenant, service_id, resource_name)
        with self._inflight_lock:
            if reservation in self._inflight_subscriptions:
                raise OperationError(
                    DUPLICATE_SUBSCRIPTION, "a subscription for this resource is already in flight"
                )
            self._inflight_subscriptions.add(reservation)
        try:
            # the transaction is built before the callback so the callback
            # can announce the delegation_id the commit will produce
            tx = self._make_tx(
                "create_delegation",
                {
                    "service": service_id,
                    "tenant": tenant,
                    "resource_name": resource_name,
                    "grant_token": grant_token,
                    "acceptance_token": acceptance_token,
                    "duration_s": duration_s,
                    "subdelegations": subdelegations,
                },
            )
            delegation_id = contracts.delegation_id_of(
                self.manager.account_id, tenant, resource_name, tx.tx_hash
            )
            outcome, detail = self._post_callback(
                callback_url,
                {
                    "event": "subscribe",
                    "tenant": tenant,
                    "resource": resource_name,
                    "delegation_id": delegation_id,
                },
            )
            if outcome != "approved":
                self._fill_nonce_gap(tx.nonce)
                if outcome == "timeout":
                    raise OperationError(CALLBACK_TIMEOUT, detail)
                raise OperationError(CALLBACK_REJECTED, detail)
            try:
                receipt = self._commit(tx)
            except OperationError as exc:
                if exc.code != NO_LEADER:
                    # terminal failure after approval (e.g. a duplicate won
                    # through another node): the service believes it
                    # approved, so let it clean up. A commit timeout is
                    # not terminal: the janitor may still land it.
                    self._notify_unsubscribes(
                        [
                            {
                                "delegation_id": delegation_id,
                                "tenant": tenant,
                                "service": service_id,
                                "resource_name": resource_name,
                                "depth": 1,
                            }
                        ]
                    )
                raise
            return receipt["result"]["delegation"]
        finally:
            with self._inflight_lock:
                self._inflight_subscriptions.discard(reservation)

    def list_delegations(self, token: str | None) -> list[dict]:
        claims = self.auth_claims(token, ROLE_TENANT)
        tenant = claims["sub"]

        def read(s):
            out = []
            for d in contracts.list_delegations(s, tenant):
                service = s["services"].get(d["service"], {})
                enriched = dict(d)
                enriched["service_name"] = service.get("name")
                enriched["service_url"] = service.get("service_url")
                out.append(enriched)
            return out

        return self._snapshot(read)

    def delete_delegation(self, body_or_params: dict, token: str | None) -> dict:
        claims = self.auth_claims(token, ROLE_TENANT)
        tenant = claims["sub"]
        service_id = _need(body_or_params, "service")
        resource_name = _need(body_or_params, "resource")
        existing = self.node.with_state(
            lambda s: contracts.active_subscription(s, tenant, service_id, resource_name)
        )
        if existing is None:
            raise OperationError(NOT_FOUND, "no active delegation for this triple")
        receipt = self._commit(
            self._make_tx(
                "delete_delegation",
                {"service": service_id, "tenant": tenant, "resource_name": resource_name},
            )
        )
        self._notify_unsubscribes(receipt["result"]["deleted_delegations"])
        # close out the final (possibly partial) billing period right away
        self.run_billing_once()
        return {"delegation": receipt["result"]["delegation"]}

    # -- callbacks ------------------------------------------------------------------------

    def _post_callback(self, url: str, event: dict) -> tuple[str, str]:
        try:
            resp = _requests.post(
                url,
                data=canonical_json(event),
                headers={"Content-Type": "application/json"},
                timeout=self.callback_timeout_s,
            )
        except _requests.RequestException as exc:
            return "timeout", f"callback did not answer: {exc.__class__.__name__}"
        if resp.status_code != 200:
            return "rejected", f"callback returned HTTP {resp.status_code}"
        try:
            body = resp.json()
        except ValueError:
            return "rejected", "callback returned a non-JSON body"
        if body.get("approved") is True:
            return "approved", ""
        return "rejected", str(body.get("reason") or "service declined the subscription")

    def _notify_unsubscribes(self, summaries: list[dict]) -> None:
        """Tell services about ended subscriptions, with retries.

        Runs detached from the request: deletion is already committed
        and must not be blocked by a slow or absent service.
        """
        leaves = [s for s in summaries if s.get("depth", 0) > 0 and s.get("tenant")]
        if not leaves:
            return
        urls = self.node.with_state(
            lambda s: {
                summary["service"]: s["services"]
                .get(summary["service"], {})
                .get("callback_url")
                for summary in leaves
            }
        )

        def worker():
            for summary in leaves:
                url = urls.get(summary["service"])
                if not url:
                    continue
                event = {
                    "event": "unsubscribe",
                    "tenant": summary["tenant"],
                    "resource": summary["resource_name"],
                    "delegation_id": summary["delegation_id"],
                }
                delay = 0.2
                for _ in range(self.unsubscribe_retries + 1):
                    outcome, _detail = self._post_callback(url, event)
                    if outcome != "timeout":
                        break
                    time.sleep(delay)
                    delay *= 2

        threading.Thread(target=worker, name="mkt-unsubscribe", daemon=True).start()

    # -- usage and quota -------------------------------------------------------------------

    def record_metrics(self, body: dict, token: str | None) -> dict:
        claims = self.auth_claims(token, ROLE_SERVICE)
        service_id = claims["sub"]
        records = _need(body, "records", list)
        signature = _need(body, "signature")
        self.node.with_state(lambda s: billing.validate_metric_records(s, service_id, records))
        digest = records_digest(records)
        if not verify_signature(service_id, digest.encode("ascii"), signature):
            raise OperationError(INVALID_SIGNATURE, "digest signature does not verify")
        result = billing.ingest_batch(self.store, service_id, records, self.now())
        receipt = self._commit(
            self._make_tx(
                "record_anchor",
                {
                    "service": service_id,
                    "batch_id": result["batch_id"],
                    "digest": result["digest"],
                    "signature": signature,
                },
            )
        )
        return {
            "batch_id": result["batch_id"],
            "digest": result["digest"],
            "duplicate": receipt["result"]["duplicate"],
            "anchor_tx": receipt["tx_hash"],
        }

    def record_quota(self, body: dict, token: str | None) -> dict:
        claims = self.auth_claims(token, ROLE_SERVICE)
        service_id = claims["sub"]
        records = _need(body, "records", list)

        def precheck(s):
            # mirror the executor's staged application so deterministic
            # failures (QUOTA_EXCEEDED and friends) never reach the ledger
            staged: dict[tuple[str, str], QuotaLedgerEntry] = {}
            now = self.now()
            for i, record in enumerate(records):
                if not isinstance(record, dict):
                    raise OperationError(MALFORMED_REQUEST, f"records[{i}] must be an object")
                delegation_id = contracts.active_subscription(
                    s, _need(record, "tenant"), service_id, _need(record, "resource_name")
                )
                if delegation_id is None:
                    raise OperationError(NOT_FOUND, f"records[{i}]: no active delegation")
                attr = _need(record, "quota_attribute")
                key = (delegation_id, attr)
                entry = staged.get(key)
                if entry is None:
                    entry_dict = s["quota"].get(delegation_id, {}).get(attr)
                    if entry_dict is None:
                        raise OperationError(NOT_FOUND, f"records[{i}]: no quota attribute {attr!r}")
                    entry = QuotaLedgerEntry.from_dict(entry_dict)
                staged[key] = apply_usage(entry, _need(record, "unitsUsed", int), at=now)

        self.node.with_state(precheck)
        receipt = self._commit(
            self._make_tx("record_quota", {"service": service_id, "records": records})
        )
        return {"updated": receipt["result"]["updated"]}

    def _assert_usage_visibility(self, tenant: str, service_id: str, resource_name: str) -> None:
        def read(s):
            if contracts.active_subscription(s, tenant, service_id, resource_name):
                return True
            # deleted subscriptions keep their history readable so past
            # bills can still be audited
            return any(
                d["grantee"] == tenant
                and d["service"] == service_id
                and d["resource_name"] == resource_name
                for d in s["delegations"].values()
            )

        if not self.node.with_state(read):
            raise OperationError(NOT_FOUND, "tenant holds no delegation for this resource")

    def query_metrics(
        self,
        token: str | None,
        service_id: str,
        resource_name: str,
        mode: str = "consolidated",
        start: int | None = None,
        end: int | None = None,
    ) -> list[dict]:
        claims = self.auth_claims(token, ROLE_TENANT)
        tenant = claims["sub"]
        if mode not in ("consolidated", "detailed"):
            raise OperationError(MALFORMED_REQUEST, "mode must be consolidated or detailed")
        self._assert_usage_visibility(tenant, service_id, resource_name)
        if mode == "detailed":
            return self.store.detailed_records(tenant, service_id, resource_name, start, end)
        return self.store.consolidated_records(tenant, service_id, resource_name, start, end)

    def query_quota(self, token: str | None, service_id: str, resource_name: str) -> list[dict]:
        claims = self.auth_claims(token, ROLE_TENANT)
        tenant = claims["sub"]
        return self._snapshot(
            lambda s: contracts.query_quota(s, tenant, service_id, resource_name, self.now())
        )

    # -- billing and payment ---------------------------------------------------------------

    def run_billing_once(self) -> int:
        """Compute and commit any closed billing periods; returns count."""
        state = self._snapshot(lambda s: s)
        bills = billing.compute_bills(state, self.store, self.now())
        if not bills:
            return 0
        receipt = self._commit(self._make_tx("record_bills", {"bills": bills}))
        return len(receipt["result"]["accepted"])

    def _billing_loop(self) -> None:
        while self._running:
            time.sleep(self.billing_interval_s)
            if not self._running:
                return
            try:
                if self.node.is_leader:
                    self.run_billing_once()
            except OperationError:
                continue

    def list_bills(self, token: str | None, filters: dict) -> list[dict]:
        claims = self.auth_claims(token)
        scoped = dict(filters)
        if claims["role"] == ROLE_TENANT:
            scoped["tenant"] = claims["sub"]
        else:
            scoped["service"] = claims["sub"]
        return self._snapshot(
            lambda s: contracts.list_bills(
                s,
                tenant=scoped.get("tenant"),
                service=scoped.get("service"),
                resource_name=scoped.get("resource"),
                bill_id=scoped.get("bill_id"),
                paid=scoped.get("paid"),
                period_start=scoped.get("period_start"),
                period_end=scoped.get("period_end"),
            )
        )

    def register_payment(self, body: dict, token: str | None) -> dict:
        claims = self.auth_claims(token, ROLE_TENANT)
        tenant = claims["sub"]
        bill_id = _need(body, "bill_id")
        currency = _need(body, "currency")
        amount = _need(body, "amount", int)

        def read(s):
            bill = s["bills"].get(bill_id)
            if bill is None or bill["tenant"] != tenant:
                raise OperationError(NOT_FOUND, "no such bill for this tenant")
            if bill["status"] == "paid":
                raise OperationError(ALREADY_PAID, "bill is already paid")
            tenant_doc = s["tenants"][tenant]
            service = s["services"].get(bill["service"], {})
            return bill, tenant_doc["charging_credential"], service.get("settlement_account")

        bill, credential, destination = self._snapshot(read)
        if currency != bill["currency"]:
            raise OperationError(MALFORMED_REQUEST, "payment currency differs from the bill")
        if amount < bill["total"]:
            raise OperationError(MALFORMED_REQUEST, "declared amount is below the bill total")
        if destination is None:
            raise OperationError(NOT_FOUND, "billing service no longer registered")
        if bill["total"] == 0:
            # nothing to transfer; settle immediately
            self._submit_mark_paid(bill_id, "zero-total")
            return {"registered": True, "bill_id": bill_id, "settled": True}
        with self._armed_lock:
            self._armed_payments[bill_id] = {
                "source": credential,
                "destination": destination,
                "min_amount": bill["total"],
            }
        return {"registered": True, "bill_id": bill_id, "settled": False}

    def _on_settlement_event(self, event: dict) -> None:
        fired = []
        with self._armed_lock:
            for bill_id, arm in list(self._armed_payments.items()):
                if (
                    event["source"] == arm["source"]
                    and event["destination"] == arm["destination"]
                    and event["amount"] >= arm["min_amount"]
                ):
                    fired.append(bill_id)
                    del self._armed_payments[bill_id]
        for bill_id in fired:
            self._submit_mark_paid(bill_id, event["event_id"])

    def _submit_mark_paid(self, bill_id: str, payment_ref: str) -> None:
        tx = self._make_tx("mark_paid", {"bill_id": bill_id, "payment_ref": payment_ref})
        self._track(tx)
        try:
            self.node.submit_transaction(tx)
        except OperationError:
            pass  # janitor retries

    # -- audits ---------------------------------------------------------------------------

    def verify_usage_integrity(self, service_id: str | None = None) -> dict:
        state = self._snapshot(lambda s: {"anchors": s["anchors"]})
        return billing.verify_usage_integrity(state, self.store, service_id)

    def status(self) -> dict:
        info = self.node.status()
        info["operator"] = self.operator.account_id
        info["manager"] = self.manager.account_id
        return info
