"""HTTP client for the marketplace API.

A thin wrapper over `requests`: one method per endpoint, canonical JSON
bodies, and a typed `ApiError` carrying the server's machine code so
callers can branch on failures the same way server-side code does. The
client holds at most one bearer token; callers juggling several roles
use one client per identity.
"""

from __future__ import annotations

import time

import requests

from . import tokens
from .canonical import canonical_json
from .keys import KeyPair


class ApiError(Exception):
    """A non-2xx marketplace response, identified by its machine code."""

    def __init__(self, status: int, code: str, message: str = "", request_id: str | None = None):
        super().__init__(f"{status} {code}: {message}")
        self.status = status
        self.code = code
        self.message = message
        self.request_id = request_id

    @classmethod
    def from_response(cls, response: requests.Response) -> "ApiError":
        try:
            body = response.json()
            error = body.get("error", {})
            return cls(
                response.status_code,
                error.get("code", "UNKNOWN"),
                error.get("message", ""),
                body.get("request_id"),
            )
        except ValueError:
            return cls(response.status_code, "UNKNOWN", response.text[:200])

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "code": self.code,
            "message": self.message,
            "request_id": self.request_id,
        }


class MarketClient:
    def __init__(self, base_url: str, *, token: str | None = None, timeout_s: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.token = token
        self.timeout_s = timeout_s
        self._session = requests.Session()

    def close(self) -> None:
        self._session.close()

    def _request(
        self,
        method: str,
        path: str,
        *,
        body: dict | None = None,
        params: dict | None = None,
        base_url: str | None = None,
    ) -> dict:
        headers = {}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        data = None
        if body is not None:
            data = canonical_json(body)
            headers["Content-Type"] = "application/json"
        response = self._session.request(
            method,
            (base_url or self.base_url) + path,
            data=data,
            params=params,
            headers=headers,
            timeout=self.timeout_s,
        )
        if response.status_code >= 400:
            raise ApiError.from_response(response)
        return response.json()

    # -- identity ------------------------------------------------------

    def authenticate(self, keypair: KeyPair, role: str, *, now: int | None = None) -> dict:
        """Log in with a fresh timestamp assertion and keep the token."""
        assertion = tokens.make_assertion(keypair, role, int(now if now is not None else time.time()))
        out = self._request(
            "POST",
            "/authentication",
            body={"account": keypair.account_id, "role": role, "assertion": assertion},
        )
        self.token = out["token"]
        return out

    def create_tenant(
        self,
        keypair: KeyPair,
        *,
        name: str,
        email: str = "unknown@example.invalid",
        phone: str = "unknown",
        charging_credential: str | None = None,
        now: int | None = None,
    ) -> dict:
        """Register a tenant account.

        All contact fields must be non-empty on the wire, so omitted
        ones get explicit placeholders; the charging credential
        defaults to an account name derived from the public key.
        """
        if not charging_credential:
            charging_credential = f"credential-{keypair.account_id[:12]}"
        assertion = tokens.make_assertion(
            keypair, "tenant", int(now if now is not None else time.time())
        )
        return self._request(
            "POST",
            "/tenants",
            body={
                "account": keypair.account_id,
                "name": name,
                "email": email,
                "phone": phone,
                "charging_credential": charging_credential,
                "assertion": assertion,
            },
        )

    def get_tenant(self, account: str) -> dict:
        return self._request("GET", f"/tenants/{account}")

    def delete_tenant(self, account: str) -> dict:
        return self._request("DELETE", f"/tenants/{account}")

    # -- services ------------------------------------------------------

    def create_service(
        self,
        keypair: KeyPair,
        *,
        name: str,
        callback_url: str,
        service_url: str,
        settlement_account: str,
        resource_documents: list[dict],
        now: int | None = None,
    ) -> dict:
        """Register a service, signing each resource document in place."""
        ts = int(now if now is not None else time.time())
        return self._request(
            "POST",
            "/services",
            body={
                "account": keypair.account_id,
                "name": name,
                "callback_url": callback_url,
                "service_url": service_url,
                "settlement_account": settlement_account,
                "assertion": tokens.make_assertion(keypair, "service", ts),
                "resources": [{"token": tokens.sign_document(keypair, doc)} for doc in resource_documents],
            },
        )

    def list_services(self, *, offset: int | None = None, limit: int | None = None) -> dict:
        params = {}
        if offset is not None:
            params["offset"] = offset
        if limit is not None:
            params["limit"] = limit
        return self._request("GET", "/services", params=params or None)

    def get_service(self, account: str) -> dict:
        return self._request("GET", f"/services/{account}")

    def delete_service(self, account: str) -> dict:
        return self._request("DELETE", f"/services/{account}")

    # -- grants + delegations ------------------------------------------

    def create_grant(
        self,
        service: str,
        resource: str,
        *,
        duration_s: int | None = None,
        subdelegations: int | None = None,
    ) -> dict:
        body: dict = {"service": service, "resource": resource}
        if duration_s is not None:
            body["duration_s"] = duration_s
        if subdelegations is not None:
            body["subdelegations"] = subdelegations
        return self._request("POST", "/grants", body=body)

    def create_delegation(
        self,
        grant_token: str,
        acceptance_token: str,
        *,
        duration_s: int | None = None,
        subdelegations: int | None = None,
    ) -> dict:
        body: dict = {"grant_token": grant_token, "acceptance_token": acceptance_token}
        if duration_s is not None:
            body["duration_s"] = duration_s
        if subdelegations is not None:
            body["subdelegations"] = subdelegations
        return self._request("POST", "/delegations", body=body)

    def subscribe(
        self,
        tenant: KeyPair,
        service: str,
        resource: str,
        *,
        duration_s: int | None = None,
        subdelegations: int | None = None,
    ) -> dict:
        """Grant, acceptance, and delegation in one breath."""
        grant = self.create_grant(
            service, resource, duration_s=duration_s, subdelegations=subdelegations
        )
        acceptance = tokens.sign_document(tenant, grant["resource_document"])
        return self.create_delegation(
            grant["grant_token"],
            acceptance,
            duration_s=duration_s,
            subdelegations=subdelegations,
        )

    def list_delegations(self) -> dict:
        return self._request("GET", "/delegations")

    def delete_delegation(self, service: str, resource: str) -> dict:
        return self._request(
            "DELETE", "/delegations", params={"service": service, "resource": resource}
        )

    # -- usage ---------------------------------------------------------

    def post_metrics(self, records: list[dict], signature: str) -> dict:
        return self._request(
            "POST", "/usage/metrics", body={"records": records, "signature": signature}
        )

    def post_quota(self, records: list[dict]) -> dict:
        return self._request("POST", "/usage/quota", body={"records": records})

    def query_metrics(self, service: str, resource: str, mode: str, start: int, end: int) -> dict:
        return self._request(
            "GET",
            "/usage/metrics",
            params={"service": service, "resource": resource, "mode": mode, "start": start, "end": end},
        )

    def query_quota(self, service: str, resource: str) -> dict:
        return self._request(
            "GET", "/usage/quota", params={"service": service, "resource": resource}
        )

    def usage_integrity(self, service: str | None = None) -> dict:
        params = {"service": service} if service else None
        return self._request("GET", "/usage/integrity", params=params)

    # -- billing -------------------------------------------------------

    def list_bills(self, **filters) -> dict:
        params = {}
        for key, value in filters.items():
            if value is None:
                continue
            if isinstance(value, bool):
                value = "true" if value else "false"
            params[key] = value
        return self._request("GET", "/billing/bills", params=params or None)

    def register_payment(self, bill_id: str, currency: str, amount: int) -> dict:
        return self._request(
            "POST",
            "/billing/payment",
            body={"bill_id": bill_id, "currency": currency, "amount": amount},
        )

    # -- introspection -------------------------------------------------

    def status(self, *, base_url: str | None = None) -> dict:
        return self._request("GET", "/status", base_url=base_url)
