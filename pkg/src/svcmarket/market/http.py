"""HTTP surface of the marketplace.

Thin routing over MarketplaceService: each endpoint extracts the bearer
token and body, delegates, and maps OperationError codes onto HTTP
statuses through one fixed table. Responses are canonical JSON. Every
request emits one structured log line.

Handlers are synchronous on purpose: they block on callbacks and ledger
commits, so FastAPI dispatches each to the worker thread pool and the
event loop stays free to accept the next request. On a follower node a
request first waits for the local commit index to catch up with the
leader, so a client that saw a write acknowledged by any node reads its
effects from every node.
"""

from __future__ import annotations

import json
import logging
import time
import typing
import uuid

from fastapi import Depends, FastAPI, Request, Response
from fastapi.middleware.cors import CORSMiddleware

from ..canonical import canonical_json
from ..errors import (
    ALREADY_EXISTS,
    ALREADY_PAID,
    BROKEN_CHAIN,
    CALLBACK_REJECTED,
    CALLBACK_TIMEOUT,
    CHARGE_MISMATCH,
    DUPLICATE_SUBSCRIPTION,
    DURATION_EXCEEDED,
    GRANT_EXPIRED,
    INSUFFICIENT_FUNDS,
    INVALID_SIGNATURE,
    LOST_LEADERSHIP,
    MALFORMED_CONTACT,
    MALFORMED_KEY,
    MALFORMED_REQUEST,
    MALFORMED_RESOURCE,
    MALFORMED_TOKEN,
    NO_LEADER,
    NOT_FOUND,
    OUT_OF_RANGE,
    OVERFLOW,
    QUOTA_EXCEEDED,
    ROLE_MISMATCH,
    SKEWED_TIMESTAMP,
    STALE_NONCE,
    TOKEN_EXPIRED,
    OperationError,
)
from .service import MarketplaceService

log = logging.getLogger("svcmarket.api")

STATUS_BY_CODE = {
    MALFORMED_REQUEST: 400,
    MALFORMED_KEY: 400,
    MALFORMED_CONTACT: 400,
    MALFORMED_RESOURCE: 400,
    MALFORMED_TOKEN: 400,
    TOKEN_EXPIRED: 401,
    INVALID_SIGNATURE: 401,
    SKEWED_TIMESTAMP: 401,
    GRANT_EXPIRED: 401,
    ROLE_MISMATCH: 403,
    NOT_FOUND: 404,
    OUT_OF_RANGE: 404,
    ALREADY_EXISTS: 409,
    DUPLICATE_SUBSCRIPTION: 409,
    ALREADY_PAID: 409,
    STALE_NONCE: 409,
    CALLBACK_REJECTED: 422,
    CALLBACK_TIMEOUT: 422,
    QUOTA_EXCEEDED: 422,
    OVERFLOW: 422,
    DURATION_EXCEEDED: 422,
    CHARGE_MISMATCH: 422,
    INSUFFICIENT_FUNDS: 422,
    BROKEN_CHAIN: 422,
    NO_LEADER: 503,
    LOST_LEADERSHIP: 503,
}


class CanonicalResponse(Response):
    media_type = "application/json"

    def render(self, content: typing.Any) -> bytes:
        return canonical_json(content)


def _error_response(exc: OperationError, request_id: str) -> CanonicalResponse:
    return CanonicalResponse(
        {"error": exc.to_dict(), "request_id": request_id},
        status_code=STATUS_BY_CODE.get(exc.code, 400),
    )


async def _body(request: Request) -> dict:
    raw = await request.body()
    if not raw:
        return {}
    try:
        parsed = json.loads(raw)
    except ValueError:
        raise OperationError(MALFORMED_REQUEST, "body is not valid JSON")
    if not isinstance(parsed, dict):
        raise OperationError(MALFORMED_REQUEST, "body must be a JSON object")
    return parsed


def _token(request: Request) -> str | None:
    header = request.headers.get("authorization", "")
    if header.lower().startswith("bearer "):
        return header[7:].strip()
    return None


def _opt_int_param(value: str | None, name: str) -> int | None:
    if value is None:
        return None
    try:
        return int(value)
    except ValueError:
        raise OperationError(MALFORMED_REQUEST, f"{name} must be an integer")


def _opt_bool_param(value: str | None, name: str) -> bool | None:
    if value is None:
        return None
    if value in ("true", "1"):
        return True
    if value in ("false", "0"):
        return False
    raise OperationError(MALFORMED_REQUEST, f"{name} must be true or false")


def create_app(svc: MarketplaceService) -> FastAPI:
    app = FastAPI(title="marketplace", docs_url=None, redoc_url=None)
    app.state.service = svc
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.on_event("startup")
    async def grow_threadpool():
        # handlers block on callbacks and commits; the pool must exceed
        # the largest parallel burst the benchmark sends (200)
        import anyio

        anyio.to_thread.current_default_thread_limiter().total_tokens = 512

    @app.exception_handler(OperationError)
    async def on_operation_error(request: Request, exc: OperationError):
        return _error_response(exc, getattr(request.state, "request_id", "-"))

    @app.middleware("http")
    async def observe(request: Request, call_next):
        request_id = uuid.uuid4().hex[:12]
        request.state.request_id = request_id
        started = time.monotonic()
        try:
            response = await call_next(request)
        except OperationError as exc:
            response = _error_response(exc, request_id)
        except Exception:
            log.exception("unhandled error handling %s %s", request.method, request.url.path)
            response = CanonicalResponse(
                {
                    "error": {"code": "INTERNAL", "message": "internal error"},
                    "request_id": request_id,
                },
                status_code=500,
            )
        log.info(
            '{"request_id": "%s", "method": "%s", "path": "%s", "status": %d, "ms": %d, "node": "%s"}',
            request_id,
            request.method,
            request.url.path,
            response.status_code,
            int((time.monotonic() - started) * 1000),
            svc.node.node_id,
        )
        return response

    def fresh():
        # a follower serves requests only after catching up to the leader
        svc.node.sync_with_leader(timeout_s=2.0)

    # -- identity ---------------------------------------------------------------

    @app.post("/authentication")
    def authenticate(request: Request, body: dict = Depends(_body)):
        fresh()
        return CanonicalResponse(svc.authenticate(body))

    @app.post("/tenants", status_code=201)
    def create_tenant(request: Request, body: dict = Depends(_body)):
        fresh()
        tenant = svc.create_tenant(body, _token(request))
        return CanonicalResponse({"tenant": tenant}, status_code=201)

    @app.get("/tenants/{account}")
    def get_tenant(account: str, request: Request):
        fresh()
        return CanonicalResponse({"tenant": svc.get_tenant(account, _token(request))})

    @app.delete("/tenants/{account}")
    def delete_tenant(account: str, request: Request):
        fresh()
        return CanonicalResponse(svc.delete_tenant(account, _token(request)))

    # -- catalog ----------------------------------------------------------------

    @app.post("/services", status_code=201)
    def create_service(request: Request, body: dict = Depends(_body)):
        fresh()
        return CanonicalResponse(svc.create_service(body, _token(request)), status_code=201)

    @app.get("/services")
    def list_services(request: Request):
        fresh()
        offset = _opt_int_param(request.query_params.get("offset"), "offset") or 0
        limit = _opt_int_param(request.query_params.get("limit"), "limit")
        return CanonicalResponse({"services": svc.list_services(offset, limit)})

    @app.get("/services/{account}")
    def get_service(account: str):
        fresh()
        return CanonicalResponse({"service": svc.get_service(account)})

    @app.delete("/services/{account}")
    def delete_service(account: str, request: Request):
        fresh()
        # the key may arrive in the path or as a query parameter
        key = request.query_params.get("key", account)
        return CanonicalResponse(svc.delete_service(key, _token(request)))

    @app.delete("/services")
    def delete_service_by_param(request: Request):
        fresh()
        key = request.query_params.get("key")
        if not key:
            raise OperationError(MALFORMED_REQUEST, "key query parameter required")
        return CanonicalResponse(svc.delete_service(key, _token(request)))

    # -- subscriptions ------------------------------------------------------------

    @app.post("/grants")
    def create_grant(request: Request, body: dict = Depends(_body)):
        fresh()
        return CanonicalResponse(svc.create_grant(body, _token(request)))

    @app.post("/delegations", status_code=201)
    def create_delegation(request: Request, body: dict = Depends(_body)):
        fresh()
        delegation = svc.create_delegation(body, _token(request))
        return CanonicalResponse({"delegation": delegation}, status_code=201)

    @app.get("/delegations")
    def list_delegations(request: Request):
        fresh()
        return CanonicalResponse({"delegations": svc.list_delegations(_token(request))})

    @app.delete("/delegations")
    def delete_delegation(request: Request, body: dict = Depends(_body)):
        fresh()
        params = dict(request.query_params) or body
        return CanonicalResponse(svc.delete_delegation(params, _token(request)))

    # -- usage ----------------------------------------------------------------------

    @app.post("/usage/metrics", status_code=202)
    def record_metrics(request: Request, body: dict = Depends(_body)):
        fresh()
        return CanonicalResponse(svc.record_metrics(body, _token(request)), status_code=202)

    @app.post("/usage/quota", status_code=202)
    def record_quota(request: Request, body: dict = Depends(_body)):
        fresh()
        return CanonicalResponse(svc.record_quota(body, _token(request)), status_code=202)

    @app.get("/usage/metrics")
    def query_metrics(request: Request):
        fresh()
        q = request.query_params
        records = svc.query_metrics(
            _token(request),
            q.get("service", ""),
            q.get("resource", ""),
            q.get("mode", "consolidated"),
            _opt_int_param(q.get("start"), "start"),
            _opt_int_param(q.get("end"), "end"),
        )
        return CanonicalResponse({"records": records})

    @app.get("/usage/quota")
    def query_quota(request: Request):
        fresh()
        q = request.query_params
        records = svc.query_quota(_token(request), q.get("service", ""), q.get("resource", ""))
        return CanonicalResponse({"records": records})

    @app.get("/usage/integrity")
    def usage_integrity(request: Request):
        fresh()
        return CanonicalResponse(svc.verify_usage_integrity(request.query_params.get("service")))

    # -- billing ----------------------------------------------------------------------

    @app.get("/billing/bills")
    def list_bills(request: Request):
        fresh()
        q = request.query_params
        filters = {
            "service": q.get("service"),
            "tenant": q.get("tenant"),
            "resource": q.get("resource"),
            "bill_id": q.get("bill_id"),
            "paid": _opt_bool_param(q.get("paid"), "paid"),
            "period_start": _opt_int_param(q.get("period_start"), "period_start"),
            "period_end": _opt_int_param(q.get("period_end"), "period_end"),
        }
        return CanonicalResponse({"bills": svc.list_bills(_token(request), filters)})

    @app.post("/billing/payment", status_code=202)
    def register_payment(request: Request, body: dict = Depends(_body)):
        fresh()
        return CanonicalResponse(svc.register_payment(body, _token(request)), status_code=202)

    # -- operations ----------------------------------------------------------------------

    @app.get("/status")
    def status():
        return CanonicalResponse(svc.status())

    return app
