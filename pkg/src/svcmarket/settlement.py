"""Simulated settlement chain for paying bills.

A deliberately small stand-in for an external payment network: accounts
hold integer balances, transfers append to an ordered event log, and
listeners observe events strictly in log order. Balances are minted
only at account creation, so the total supply is conserved by every
transfer; tests lean on that invariant.

The chain runs in-process by default. For integration setups it can be
served over HTTP with the same event semantics (`settlement_app`), and
`SettlementClient` gives remote callers the in-process interface by
polling the event log.
"""

from __future__ import annotations

import threading
import time

from .canonical import canonical_json, sha256_hex
from .errors import (
    ALREADY_EXISTS,
    INSUFFICIENT_FUNDS,
    MALFORMED_REQUEST,
    NOT_FOUND,
    OperationError,
)
from .keys import random_account_id


def _event_id(index: int, source: str, destination: str, amount: int) -> str:
    return sha256_hex(
        canonical_json(
            {"amount": amount, "destination": destination, "index": index, "source": source}
        )
    )


class SettlementChain:
    def __init__(self, clock=time.time):
        self._clock = clock
        self._lock = threading.Lock()
        self._balances: dict[str, int] = {}
        self._events: list[dict] = []
        self._subscribers: list[dict] = []
        self._dispatch_cv = threading.Condition(self._lock)
        self._stopped = False
        self._dispatcher = threading.Thread(target=self._dispatch_loop, daemon=True)
        self._dispatcher.start()

    def close(self) -> None:
        with self._lock:
            self._stopped = True
            self._dispatch_cv.notify_all()
        self._dispatcher.join(timeout=2)

    def create_account(self, address: str | None = None, balance: int = 0) -> str:
        if not isinstance(balance, int) or isinstance(balance, bool) or balance < 0:
            raise OperationError(MALFORMED_REQUEST, "balance must be a non-negative integer")
        with self._lock:
            if address is None:
                address = random_account_id()
            elif not isinstance(address, str) or not address:
                raise OperationError(MALFORMED_REQUEST, "address must be a non-empty string")
            if address in self._balances:
                raise OperationError(ALREADY_EXISTS, "account already exists")
            self._balances[address] = balance
        return address

    def balance(self, address: str) -> int:
        with self._lock:
            if address not in self._balances:
                raise OperationError(NOT_FOUND, "unknown account")
            return self._balances[address]

    def total_supply(self) -> int:
        with self._lock:
            return sum(self._balances.values())

    def transfer(self, source: str, destination: str, amount: int) -> dict:
        if not isinstance(amount, int) or isinstance(amount, bool) or amount <= 0:
            raise OperationError(MALFORMED_REQUEST, "amount must be a positive integer")
        with self._lock:
            if source not in self._balances or destination not in self._balances:
                raise OperationError(NOT_FOUND, "unknown account")
            if self._balances[source] < amount:
                raise OperationError(INSUFFICIENT_FUNDS, "source balance too low")
            self._balances[source] -= amount
            self._balances[destination] += amount
            index = len(self._events)
            event = {
                "event_id": _event_id(index, source, destination, amount),
                "index": index,
                "source": source,
                "destination": destination,
                "amount": amount,
                "timestamp": int(self._clock()),
            }
            self._events.append(event)
            self._dispatch_cv.notify_all()
        return event

    def events_after(self, index: int) -> list[dict]:
        """Events with log index strictly greater than `index`."""
        with self._lock:
            return list(self._events[index + 1 :])

    def event_count(self) -> int:
        with self._lock:
            return len(self._events)

    def subscribe(self, callback) -> object:
        """Register a listener for future events only.

        The callback runs on the dispatcher thread, one event at a time
        in log order. Exceptions it raises are swallowed so one broken
        listener cannot stall the others.
        """
        with self._lock:
            handle = {"callback": callback, "next": len(self._events), "active": True}
            self._subscribers.append(handle)
        return handle

    def unsubscribe(self, handle) -> None:
        with self._lock:
            handle["active"] = False
            if handle in self._subscribers:
                self._subscribers.remove(handle)

    def drain(self, timeout: float = 5.0) -> None:
        """Block until every subscriber has seen every current event."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                pending = any(h["next"] < len(self._events) for h in self._subscribers)
            if not pending:
                return
            time.sleep(0.005)
        raise TimeoutError("settlement event delivery did not drain")

    def _dispatch_loop(self) -> None:
        while True:
            with self._lock:
                while not self._stopped and not any(
                    h["next"] < len(self._events) for h in self._subscribers
                ):
                    self._dispatch_cv.wait(timeout=0.5)
                if self._stopped:
                    return
                work = []
                for handle in self._subscribers:
                    if handle["next"] < len(self._events):
                        work.append((handle, self._events[handle["next"]]))
                        handle["next"] += 1
            for handle, event in work:
                if not handle["active"]:
                    continue
                try:
                    handle["callback"](event)
                except Exception:
                    pass


def settlement_app(chain: SettlementChain):
    """HTTP surface over a chain, same event semantics as in-process."""
    from fastapi import FastAPI, Request
    from fastapi.responses import JSONResponse

    app = FastAPI(title="settlement-sim", docs_url=None, redoc_url=None)

    _STATUS = {
        MALFORMED_REQUEST: 400,
        NOT_FOUND: 404,
        ALREADY_EXISTS: 409,
        INSUFFICIENT_FUNDS: 422,
    }

    @app.exception_handler(OperationError)
    async def _on_error(request: Request, exc: OperationError):
        return JSONResponse(status_code=_STATUS.get(exc.code, 400), content={"error": exc.to_dict()})

    @app.post("/accounts")
    async def create_account(body: dict):
        address = chain.create_account(body.get("address"), body.get("balance", 0))
        return {"address": address, "balance": chain.balance(address)}

    @app.get("/accounts/{address}")
    async def get_account(address: str):
        return {"address": address, "balance": chain.balance(address)}

    @app.post("/transfer")
    async def transfer(body: dict):
        for key in ("source", "destination", "amount"):
            if key not in body:
                raise OperationError(MALFORMED_REQUEST, f"missing {key!r}")
        event = chain.transfer(body["source"], body["destination"], body["amount"])
        return {"event": event}

    @app.get("/events")
    async def events(after: int = -1):
        batch = chain.events_after(after)
        return {"events": batch, "next": batch[-1]["index"] if batch else after}

    return app


class SettlementClient:
    """In-process interface to a remote settlement chain.

    Subscriptions are served by one polling thread; per-subscriber
    ordering matches the in-process chain.
    """

    def __init__(self, base_url: str, poll_interval: float = 0.2):
        import requests

        self._requests = requests
        self._base = base_url.rstrip("/")
        self._poll_interval = poll_interval
        self._lock = threading.Lock()
        self._subscribers: list[dict] = []
        self._poller: threading.Thread | None = None
        self._stopped = False

    def _call(self, method: str, path: str, **kwargs) -> dict:
        resp = self._requests.request(method, self._base + path, timeout=10, **kwargs)
        body = resp.json()
        if resp.status_code >= 400:
            error = body.get("error", {})
            raise OperationError(error.get("code", MALFORMED_REQUEST), error.get("message", ""))
        return body

    def create_account(self, address: str | None = None, balance: int = 0) -> str:
        body: dict = {"balance": balance}
        if address is not None:
            body["address"] = address
        return self._call("POST", "/accounts", json=body)["address"]

    def balance(self, address: str) -> int:
        return self._call("GET", f"/accounts/{address}")["balance"]

    def transfer(self, source: str, destination: str, amount: int) -> dict:
        return self._call(
            "POST", "/transfer", json={"source": source, "destination": destination, "amount": amount}
        )["event"]

    def events_after(self, index: int) -> list[dict]:
        return self._call("GET", f"/events?after={index}")["events"]

    def event_count(self) -> int:
        events = self._call("GET", "/events?after=-1")["events"]
        return len(events)

    def subscribe(self, callback) -> object:
        with self._lock:
            handle = {"callback": callback, "next": self.event_count(), "active": True}
            self._subscribers.append(handle)
            if self._poller is None:
                self._poller = threading.Thread(target=self._poll_loop, daemon=True)
                self._poller.start()
        return handle

    def unsubscribe(self, handle) -> None:
        with self._lock:
            handle["active"] = False
            if handle in self._subscribers:
                self._subscribers.remove(handle)

    def close(self) -> None:
        with self._lock:
            self._stopped = True

    def _poll_loop(self) -> None:
        while True:
            with self._lock:
                if self._stopped:
                    return
                subscribers = list(self._subscribers)
            low = min((h["next"] for h in subscribers), default=None)
            if low is not None:
                try:
                    events = self.events_after(low - 1)
                except Exception:
                    events = []
                for event in events:
                    for handle in subscribers:
                        if handle["active"] and handle["next"] == event["index"]:
                            handle["next"] += 1
                            try:
                                handle["callback"](event)
                            except Exception:
                                pass
            time.sleep(self._poll_interval)
