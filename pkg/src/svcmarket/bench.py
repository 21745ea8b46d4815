"""Benchmark load generator for the marketplace API.

Two request regimes are reproduced. In the sequential regime one client
issues requests strictly one at a time against a single node, so each
write lands in its own block. In the random regime every unit of work
runs in parallel and each individual request goes to a uniformly random
node, measuring the cluster rather than a single server.

A unit of work depends on the operation; for `subscribe` it is the
grant request plus the delegation request of one tenant, so the per-op
time is the sum of the per-tenant averages of the two calls. Per-op
time is defined as run total divided by unit count, which keeps
`per_op_ms * count == total_ms` exact.

Setup work (creating the accounts a run needs) happens outside the
timed section. A run aborts on the first failed request and its partial
timings are discarded; remaining runs still count.
"""

from __future__ import annotations

import csv
import json
import random
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from . import tokens
from .canonical import canonical_json
from .client import ApiError, MarketClient
from .keys import KeyPair

OPERATIONS = (
    "tenant-create",
    "authenticate",
    "service-register",
    "service-deregister",
    "service-list",
    "subscribe",
)
REGIME_SEQUENTIAL = "sequential"
REGIME_RANDOM = "random"
REGIMES = (REGIME_SEQUENTIAL, REGIME_RANDOM)

# upper tail of the chi-square distribution at 5%, by degrees of freedom
_CHI2_CRITICAL_5PCT = {
    1: 3.841, 2: 5.991, 3: 7.815, 4: 9.488, 5: 11.070,
    6: 12.592, 7: 14.067, 8: 15.507, 9: 16.919, 10: 18.307,
}

_SETUP_POOL = 32


@dataclass(frozen=True)
class BenchPlan:
    operation: str
    counts: tuple[int, ...]
    regime: str
    nodes: tuple[str, ...]
    runs: int = 2

    def __post_init__(self):
        if self.operation not in OPERATIONS:
            raise ValueError(f"unknown operation {self.operation!r}")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        counts = tuple(self.counts)
        if not counts or list(counts) != sorted(counts) or len(set(counts)) != len(counts):
            raise ValueError("counts must be non-empty and strictly ascending")
        if any(not isinstance(c, int) or c < 1 for c in counts):
            raise ValueError("counts must be positive integers")
        object.__setattr__(self, "counts", counts)
        nodes = tuple(self.nodes)
        if not nodes:
            raise ValueError("at least one node endpoint is required")
        object.__setattr__(self, "nodes", nodes)
        if not isinstance(self.runs, int) or self.runs < 1:
            raise ValueError("runs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "operation": self.operation,
            "counts": list(self.counts),
            "regime": self.regime,
            "nodes": list(self.nodes),
            "runs": self.runs,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BenchPlan":
        return cls(
            operation=data["operation"],
            counts=tuple(data["counts"]),
            regime=data["regime"],
            nodes=tuple(data["nodes"]),
            runs=data.get("runs", 2),
        )


@dataclass
class RunSample:
    total_ms: float = 0.0
    per_op_ms: float = 0.0
    node_choices: dict[str, int] = field(default_factory=dict)
    blocks_delta: int = 0
    max_in_flight: int = 0
    aborted: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "total_ms": self.total_ms,
            "per_op_ms": self.per_op_ms,
            "node_choices": self.node_choices,
            "blocks_delta": self.blocks_delta,
            "max_in_flight": self.max_in_flight,
            "aborted": self.aborted,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunSample":
        return cls(**data)


@dataclass
class BenchCell:
    """All runs of one (operation, count, regime) combination."""

    operation: str
    count: int
    regime: str
    samples: list[RunSample] = field(default_factory=list)

    @property
    def completed(self) -> list[RunSample]:
        return [s for s in self.samples if not s.aborted]

    @property
    def status(self) -> str:
        return "OK" if self.completed else "ABORTED"

    @property
    def per_op_ms_mean(self) -> float | None:
        done = self.completed
        if not done:
            return None
        return sum(s.per_op_ms for s in done) / len(done)

    @property
    def total_ms_mean(self) -> float | None:
        done = self.completed
        if not done:
            return None
        return sum(s.total_ms for s in done) / len(done)

    @property
    def spread_ms(self) -> float | None:
        done = self.completed
        if not done:
            return None
        values = [s.per_op_ms for s in done]
        return max(values) - min(values)

    def to_dict(self) -> dict:
        return {
            "operation": self.operation,
            "count": self.count,
            "regime": self.regime,
            "samples": [s.to_dict() for s in self.samples],
            "status": self.status,
            "per_op_ms_mean": self.per_op_ms_mean,
            "total_ms_mean": self.total_ms_mean,
            "spread_ms": self.spread_ms,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BenchCell":
        return cls(
            operation=data["operation"],
            count=data["count"],
            regime=data["regime"],
            samples=[RunSample.from_dict(s) for s in data["samples"]],
        )


@dataclass
class BenchResult:
    plans: list[BenchPlan]
    cells: list[BenchCell]

    def cell(self, operation: str, count: int, regime: str) -> BenchCell | None:
        for cell in self.cells:
            if (cell.operation, cell.count, cell.regime) == (operation, count, regime):
                return cell
        return None

    def merge(self, other: "BenchResult") -> "BenchResult":
        return BenchResult(self.plans + other.plans, self.cells + other.cells)

    def to_dict(self) -> dict:
        return {
            "plans": [p.to_dict() for p in self.plans],
            "cells": [c.to_dict() for c in self.cells],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BenchResult":
        return cls(
            plans=[BenchPlan.from_dict(p) for p in data["plans"]],
            cells=[BenchCell.from_dict(c) for c in data["cells"]],
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "BenchResult":
        return cls.from_dict(json.loads(Path(path).read_text()))


def chi_square_uniform(observed: list[int]) -> tuple[float, float, bool]:
    """Test observed category counts against a uniform split at 5%.

    Returns (statistic, critical value, within critical). Degrees of
    freedom above the built-in table are rejected outright.
    """
    k = len(observed)
    if k < 2:
        raise ValueError("need at least two categories")
    if k - 1 not in _CHI2_CRITICAL_5PCT:
        raise ValueError("too many categories for the built-in critical values")
    total = sum(observed)
    if total == 0:
        raise ValueError("no observations")
    expected = total / k
    statistic = sum((n - expected) ** 2 / expected for n in observed)
    critical = _CHI2_CRITICAL_5PCT[k - 1]
    return statistic, critical, statistic <= critical


class _Approver:
    """Minimal callback endpoint that approves every subscription."""

    def __init__(self, host: str = "127.0.0.1"):
        body = canonical_json({"approved": True})

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                self.rfile.read(int(self.headers.get("Content-Length", "0")))
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer((host, 0), Handler)
        self.url = f"http://{host}:{self._server.server_address[1]}/callback"
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=2)


class _NodePicker:
    """Hands out the node for each request and tallies the choices."""

    def __init__(self, nodes: tuple[str, ...], regime: str, rng: random.Random):
        self._nodes = nodes
        self._regime = regime
        self._rng = rng
        self._lock = threading.Lock()
        self.choices = {node: 0 for node in nodes}

    def pick(self) -> str:
        with self._lock:
            if self._regime == REGIME_SEQUENTIAL:
                node = self._nodes[0]
            else:
                node = self._nodes[self._rng.randrange(len(self._nodes))]
            self.choices[node] += 1
            return node


class _InFlightGauge:
    def __init__(self):
        self._lock = threading.Lock()
        self._current = 0
        self.maximum = 0

    def __enter__(self):
        with self._lock:
            self._current += 1
            self.maximum = max(self.maximum, self._current)
        return self

    def __exit__(self, *exc):
        with self._lock:
            self._current -= 1


class _BenchAbort(Exception):
    pass


def _parallel_map(fn, items, pool_size: int) -> None:
    with ThreadPoolExecutor(max_workers=pool_size) as pool:
        for future in [pool.submit(fn, item) for item in items]:
            future.result()


def _fixture_document(name: str) -> dict:
    from importlib import resources as importlib_resources

    path = importlib_resources.files("svcmarket") / "fixtures" / f"{name}.json"
    return json.loads(path.read_text())


class _Workload:
    """Builds the per-run units for one operation.

    `setup` runs untimed and may create accounts; it returns a list of
    unit callables. Each unit takes the node picker and performs its
    requests against freshly picked nodes. `cleanup` undoes catalog
    pollution so later cells start from the same baseline.
    """

    def __init__(self, operation: str, nodes: tuple[str, ...], resource_fixture: str):
        self.operation = operation
        self.nodes = nodes
        self.resource_fixture = resource_fixture
        self.document = _fixture_document(resource_fixture)
        self.resource_name = self.document["resource"]["name"]
        self._approver: _Approver | None = None

    def close(self) -> None:
        if self._approver is not None:
            self._approver.close()
            self._approver = None

    def _callback_url(self) -> str:
        if self._approver is None:
            self._approver = _Approver()
        return self._approver.url

    def _client(self) -> MarketClient:
        return MarketClient(self.nodes[0])

    def _register_service(self, client: MarketClient, keypair: KeyPair) -> None:
        client.create_service(
            keypair,
            name=f"bench-{uuid.uuid4().hex[:8]}",
            callback_url=self._callback_url(),
            service_url="http://bench.invalid/",
            settlement_account=f"settle-{keypair.account_id[:12]}",
            resource_documents=[self.document],
        )

    def setup(self, count: int):
        make = getattr(self, f"_setup_{self.operation.replace('-', '_')}")
        return make(count)

    # one method per operation; each returns (units, cleanup)

    def _setup_tenant_create(self, count: int):
        keypairs = [KeyPair.generate() for _ in range(count)]

        def unit_for(keypair):
            client = MarketClient(self.nodes[0])

            def unit(picker):
                client.base_url = picker.pick()
                client.create_tenant(keypair, name=f"bench-{keypair.account_id[:10]}")

            return unit

        return [unit_for(kp) for kp in keypairs], lambda: None

    def _setup_authenticate(self, count: int):
        keypairs = [KeyPair.generate() for _ in range(count)]
        _parallel_map(
            lambda kp: self._client().create_tenant(kp, name=f"bench-{kp.account_id[:10]}"),
            keypairs,
            _SETUP_POOL,
        )

        def unit_for(keypair):
            client = MarketClient(self.nodes[0])

            def unit(picker):
                client.base_url = picker.pick()
                client.authenticate(keypair, "tenant")

            return unit

        return [unit_for(kp) for kp in keypairs], lambda: None

    def _setup_service_register(self, count: int):
        keypairs = [KeyPair.generate() for _ in range(count)]

        def unit_for(keypair):
            client = MarketClient(self.nodes[0])

            def unit(picker):
                client.base_url = picker.pick()
                self._register_service(client, keypair)

            return unit

        def cleanup():
            client = self._client()
            for keypair in keypairs:
                try:
                    client.authenticate(keypair, "service")
                    client.delete_service(keypair.account_id)
                except ApiError:
                    pass

        return [unit_for(kp) for kp in keypairs], cleanup

    def _setup_service_deregister(self, count: int):
        keypairs = [KeyPair.generate() for _ in range(count)]
        clients = {}

        def prepare(keypair):
            client = MarketClient(self.nodes[0])
            self._register_service(client, keypair)
            client.authenticate(keypair, "service")
            clients[keypair.account_id] = client

        _parallel_map(prepare, keypairs, _SETUP_POOL)

        def unit_for(keypair):
            client = clients[keypair.account_id]

            def unit(picker):
                client.base_url = picker.pick()
                client.delete_service(keypair.account_id)

            return unit

        return [unit_for(kp) for kp in keypairs], lambda: None

    def _setup_service_list(self, count: int):
        keypairs = [KeyPair.generate() for _ in range(count)]
        setup_client = self._client()

        def prepare(keypair):
            client = MarketClient(self.nodes[0])
            self._register_service(client, keypair)

        _parallel_map(prepare, keypairs, _SETUP_POOL)

        def make_unit():
            client = MarketClient(self.nodes[0])

            def unit(picker):
                client.base_url = picker.pick()
                client.list_services()

            return unit

        def cleanup():
            for keypair in keypairs:
                try:
                    setup_client.authenticate(keypair, "service")
                    setup_client.delete_service(keypair.account_id)
                except ApiError:
                    pass

        return [make_unit() for _ in range(count)], cleanup

    def _setup_subscribe(self, count: int):
        service_keypair = KeyPair.generate()
        self._register_service(self._client(), service_keypair)
        service_id = service_keypair.account_id
        tenants = [(KeyPair.generate(), MarketClient(self.nodes[0])) for _ in range(count)]

        def prepare(pair):
            keypair, client = pair
            client.create_tenant(keypair, name=f"bench-{keypair.account_id[:10]}")
            client.authenticate(keypair, "tenant")

        _parallel_map(prepare, tenants, _SETUP_POOL)

        def unit_for(keypair, client):
            def unit(picker):
                client.base_url = picker.pick()
                grant = client.create_grant(service_id, self.resource_name)
                acceptance = tokens.sign_document(keypair, grant["resource_document"])
                client.base_url = picker.pick()
                client.create_delegation(grant["grant_token"], acceptance)

            return unit

        return [unit_for(kp, c) for kp, c in tenants], lambda: None


def _commit_index(node: str) -> int:
    return MarketClient(node).status()["commit_index"]


def run_bench(plan: BenchPlan, *, seed: int | None = None, resource_fixture: str = "small-process") -> BenchResult:
    """Execute every (count, run) of the plan and collect timings."""
    rng = random.Random(seed)
    workload = _Workload(plan.operation, plan.nodes, resource_fixture)
    cells = []
    try:
        for count in plan.counts:
            cell = BenchCell(plan.operation, count, plan.regime)
            cells.append(cell)
            for _ in range(plan.runs):
                cell.samples.append(_run_once(plan, workload, count, rng))
    finally:
        workload.close()
    return BenchResult([plan], cells)


def _run_once(plan: BenchPlan, workload: _Workload, count: int, rng: random.Random) -> RunSample:
    sample = RunSample()
    units, cleanup = workload.setup(count)
    picker = _NodePicker(plan.nodes, plan.regime, rng)
    gauge = _InFlightGauge()

    def execute(unit):
        with gauge:
            unit(picker)

    blocks_before = _commit_index(plan.nodes[0])
    started = time.monotonic()
    try:
        if plan.regime == REGIME_SEQUENTIAL:
            for unit in units:
                execute(unit)
        else:
            with ThreadPoolExecutor(max_workers=count) as pool:
                futures = [pool.submit(execute, unit) for unit in units]
                for future in futures:
                    future.result()
    except (ApiError, OSError) as exc:
        sample.aborted = True
        sample.error = str(exc)
    total_ms = (time.monotonic() - started) * 1000.0
    sample.node_choices = dict(picker.choices)
    sample.max_in_flight = gauge.maximum
    sample.blocks_delta = _commit_index(plan.nodes[0]) - blocks_before
    if not sample.aborted:
        sample.total_ms = total_ms
        sample.per_op_ms = total_ms / count
    cleanup()
    return sample


def emit_report(result: BenchResult, out_dir: str | Path) -> list[Path]:
    """Write the raw samples plus one CSV per operation.

    The CSV has one row per count with sequential and random per-op
    columns; re-emitting from the saved raw file reproduces the exact
    same bytes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [result.save(out_dir / "bench_raw.json")]
    # plans with no surviving cells still get their header-only CSV
    operations = sorted(
        {cell.operation for cell in result.cells} | {plan.operation for plan in result.plans}
    )
    for operation in operations:
        counts = sorted({c.count for c in result.cells if c.operation == operation})
        path = out_dir / f"bench_{operation}.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["count", "sequential_per_op_ms", "random_per_op_ms"])
            for count in counts:
                row = [str(count)]
                for regime in REGIMES:
                    cell = result.cell(operation, count, regime)
                    mean = cell.per_op_ms_mean if cell else None
                    row.append("" if mean is None else f"{mean:.3f}")
                writer.writerow(row)
        written.append(path)
    return written
