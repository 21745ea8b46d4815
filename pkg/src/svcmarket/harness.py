"""Mock services for tests and benchmarks.

A `HarnessService` plays the part of a real service provider: it
registers itself with the marketplace, answers subscription callbacks
according to a fixed policy, launches a per-tenant instance for every
approved delegation, and periodically collects usage from plugins and
pushes it to the marketplace.

Instances are in-process HTTP handlers bound to distinct ports; the
instance id is the delegation id announced in the subscribe callback,
so a running instance corresponds one-to-one with an active delegation.
Usage collection follows a pull model: each tick, every plugin reports
(metric, units, window) tuples per instance, which become signed metric
record batches. Failed pushes are buffered and retried next tick; batch
ids derive from batch content, so retries never double-bill.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .canonical import canonical_json
from .client import ApiError, MarketClient
from .keys import KeyPair
from .resources import KIND_RENEWABLE, ResourceDescription, validate_resource_value
from .usage import records_digest

log = logging.getLogger("svcmarket.harness")

POLICY_APPROVE = "approve"
POLICY_REJECT = "reject"
POLICY_DELAY = "delay"
_POLICIES = (POLICY_APPROVE, POLICY_REJECT, POLICY_DELAY)

_STUB_PAGE = b"<html><body><h1>instance %s</h1><p>tenant %s</p></body></html>"


class TenantInstance:
    """One running endpoint per approved delegation, serving a stub page."""

    def __init__(self, tenant: str, resource_name: str, instance_id: str, host: str, stats_path: Path):
        self.tenant = tenant
        self.resource_name = resource_name
        self.instance_id = instance_id
        self.host = host
        self.stats_path = stats_path
        self.status = "stopped"
        self.port = 0
        self.started_at = 0
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        return f"http://{self.host}:{self.port}/"

    def start(self, now: int) -> None:
        if self.status == "running":
            return
        page = _STUB_PAGE % (self.instance_id.encode(), self.tenant.encode())

        class Stub(BaseHTTPRequestHandler):
            def do_GET(self):
                self.send_response(200)
                self.send_header("Content-Type", "text/html")
                self.send_header("Content-Length", str(len(page)))
                self.end_headers()
                self.wfile.write(page)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer((self.host, 0), Stub)
        self.port = self._server.server_address[1]
        self._thread = threading.Thread(
            target=self._server.serve_forever, name=f"instance-{self.port}", daemon=True
        )
        self._thread.start()
        self.status = "running"
        self.started_at = now

    def stop(self) -> None:
        if self.status != "running":
            return
        self.status = "stopped"
        server, thread = self._server, self._thread
        self._server = self._thread = None
        if server is not None:
            server.shutdown()
            server.server_close()
        if thread is not None:
            thread.join(timeout=2)


class CounterPlugin:
    """In-memory usage counters, drained at each collection."""

    def __init__(self, clock=time.time):
        self._clock = clock
        self._lock = threading.Lock()
        self._counts: dict[tuple[str, str], int] = {}
        self._window_start: dict[str, int] = {}

    def add(self, instance_id: str, metric: str, units: int) -> None:
        if not isinstance(units, int) or units < 0:
            raise ValueError("units must be a non-negative integer")
        with self._lock:
            key = (instance_id, metric)
            self._counts[key] = self._counts.get(key, 0) + units

    def collect(self, instance: TenantInstance) -> list[tuple[str, int, tuple[int, int]]]:
        now = int(self._clock())
        with self._lock:
            start = self._window_start.get(instance.instance_id, instance.started_at)
            end = max(now, start + 1)
            self._window_start[instance.instance_id] = end
            out = []
            for (instance_id, metric), units in list(self._counts.items()):
                if instance_id != instance.instance_id or units == 0:
                    continue
                out.append((metric, units, (start, end)))
                del self._counts[(instance_id, metric)]
            return out


class FileStatsPlugin:
    """Reads per-instance stats files of JSON lines {metric, units, ts}."""

    def __init__(self):
        self._offsets: dict[str, int] = {}

    def collect(self, instance: TenantInstance) -> list[tuple[str, int, tuple[int, int]]]:
        path = instance.stats_path
        if not path.exists():
            return []
        offset = self._offsets.get(instance.instance_id, 0)
        with path.open("rb") as fh:
            fh.seek(offset)
            chunk = fh.read()
        # only consume complete lines; a partially written tail waits
        end = chunk.rfind(b"\n")
        if end < 0:
            return []
        self._offsets[instance.instance_id] = offset + end + 1
        out = []
        for line in chunk[: end + 1].splitlines():
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
                metric, units, ts = entry["metric"], entry["units"], entry["ts"]
            except (ValueError, TypeError, KeyError):
                log.warning("skipping malformed stats line in %s", path)
                continue
            if not isinstance(units, int) or not isinstance(ts, int) or units < 0:
                log.warning("skipping malformed stats line in %s", path)
                continue
            out.append((metric, units, (ts, ts + 1)))
        return out


class HarnessService:
    """A scripted service provider driven entirely by callbacks and ticks."""

    def __init__(
        self,
        keypair: KeyPair | None = None,
        resources: list[dict] = (),
        *,
        name: str,
        marketplace_url: str | None = None,
        policy: str = POLICY_APPROVE,
        delay_ms: int = 0,
        reject_reason: str = "not accepting subscriptions",
        usage_rates: dict[str, dict[str, int]] | None = None,
        quota_rates: dict[str, dict[str, int]] | None = None,
        plugins: list | None = None,
        settlement_account: str | None = None,
        data_dir: str | Path | None = None,
        host: str = "127.0.0.1",
        clock=time.time,
    ):
        if policy not in _POLICIES:
            raise ValueError(f"policy must be one of {_POLICIES}")
        if not isinstance(delay_ms, int) or delay_ms < 0:
            raise ValueError("delay_ms must be a non-negative integer")
        if policy == POLICY_DELAY and delay_ms == 0:
            raise ValueError("delay policy needs delay_ms > 0")
        self.keypair = keypair or KeyPair.generate()
        self.name = name
        self.policy = policy
        self.delay_ms = delay_ms
        self.reject_reason = reject_reason
        self.host = host
        self.clock = clock
        self.settlement_account = settlement_account or f"settle-{self.keypair.account_id[:12]}"
        self.documents: dict[str, dict] = {}
        self.descriptions: dict[str, ResourceDescription] = {}
        for doc in resources:
            rd = validate_resource_value(doc)
            if rd.name in self.documents:
                raise ValueError(f"duplicate resource {rd.name!r}")
            self.documents[rd.name] = doc
            self.descriptions[rd.name] = rd
        self.usage_rates = self._check_rates(usage_rates or {}, kind="metric")
        self.quota_rates = self._check_rates(quota_rates or {}, kind="quota")
        self.counter = CounterPlugin(clock=clock)
        self.plugins = list(plugins) if plugins is not None else []
        if self.counter not in self.plugins:
            self.plugins.insert(0, self.counter)
        self.data_dir = Path(data_dir) if data_dir else None
        self.client = MarketClient(marketplace_url) if marketplace_url else None
        self.tick_s = 1.0
        self._token_exp = 0
        self._lock = threading.RLock()
        self._instances: dict[tuple[str, str], TenantInstance] = {}
        self._pending_batches: list[list[dict]] = []
        self._quota_spent: dict[tuple[str, str, str], dict] = {}
        self._server: ThreadingHTTPServer | None = None
        self._server_thread: threading.Thread | None = None
        self._tick_thread: threading.Thread | None = None
        self._tick_stop = threading.Event()
        self.port = 0

    def _check_rates(self, rates: dict, *, kind: str) -> dict:
        for resource_name, per_metric in rates.items():
            rd = self.descriptions.get(resource_name)
            if rd is None:
                raise ValueError(f"rates reference unknown resource {resource_name!r}")
            for attr, units in per_metric.items():
                known = rd.metric(attr) if kind == "metric" else rd.quota_attribute(attr)
                if known is None:
                    raise ValueError(f"rates reference unknown {kind} {attr!r}")
                if not isinstance(units, int) or units < 0:
                    raise ValueError("per-tick units must be non-negative integers")
        return rates

    # -- lifecycle -----------------------------------------------------

    @property
    def account_id(self) -> str:
        return self.keypair.account_id

    @property
    def service_url(self) -> str:
        return f"http://{self.host}:{self.port}/"

    @property
    def callback_url(self) -> str:
        return f"http://{self.host}:{self.port}/callback"

    def start(self) -> None:
        """Bring up the callback endpoint; idempotent."""
        if self._server is not None:
            return
        service = self

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self):
                page = _STUB_PAGE % (service.name.encode(), b"-")
                self.send_response(200)
                self.send_header("Content-Type", "text/html")
                self.send_header("Content-Length", str(len(page)))
                self.end_headers()
                self.wfile.write(page)

            def do_POST(self):
                try:
                    length = int(self.headers.get("Content-Length", "0"))
                    event = json.loads(self.rfile.read(length))
                    if not isinstance(event, dict):
                        raise ValueError("not an object")
                except ValueError:
                    self._reply(400, {"approved": False, "reason": "malformed event"})
                    return
                try:
                    decision = service.handle_callback(event)
                except ValueError as exc:
                    self._reply(400, {"approved": False, "reason": str(exc)})
                    return
                self._reply(200, decision)

            def _reply(self, status: int, body: dict) -> None:
                data = canonical_json(body)
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer((self.host, 0), Handler)
        self.port = self._server.server_address[1]
        self._server_thread = threading.Thread(
            target=self._server.serve_forever, name=f"harness-{self.name}", daemon=True
        )
        self._server_thread.start()

    def stop(self) -> None:
        self.stop_ticking()
        with self._lock:
            instances = list(self._instances.values())
        for instance in instances:
            instance.stop()
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None
        if self._server_thread is not None:
            self._server_thread.join(timeout=2)
            self._server_thread = None

    @classmethod
    def from_config(cls, path: str | Path, **overrides) -> "HarnessService":
        """Build a harness from a JSON config file.

        Keys: name, policy {mode, delay_ms?, reason?}, resources (inline
        documents or file paths relative to the config), tick_s,
        usage_rates, quota_rates, settlement_account, marketplace_url.
        """
        path = Path(path)
        config = json.loads(path.read_text())
        documents = []
        for entry in config.get("resources", []):
            if isinstance(entry, str):
                documents.append(json.loads((path.parent / entry).read_text()))
            else:
                documents.append(entry)
        policy = config.get("policy", {})
        kwargs = dict(
            name=config["name"],
            policy=policy.get("mode", POLICY_APPROVE),
            delay_ms=policy.get("delay_ms", 0),
            reject_reason=policy.get("reason", "not accepting subscriptions"),
            usage_rates=config.get("usage_rates"),
            quota_rates=config.get("quota_rates"),
            settlement_account=config.get("settlement_account"),
            marketplace_url=config.get("marketplace_url"),
        )
        kwargs.update(overrides)
        service = cls(resources=documents, **kwargs)
        service.tick_s = config.get("tick_s", 1.0)
        return service

    # -- marketplace side ----------------------------------------------

    def register_with_marketplace(self, marketplace_url: str | None = None) -> str:
        """Create the service account and publish the resource offering."""
        if marketplace_url:
            self.client = MarketClient(marketplace_url)
        if self.client is None:
            raise ValueError("no marketplace url configured")
        self.start()
        self.client.create_service(
            self.keypair,
            name=self.name,
            callback_url=self.callback_url,
            service_url=self.service_url,
            settlement_account=self.settlement_account,
            resource_documents=list(self.documents.values()),
            now=int(self.clock()),
        )
        return self.account_id

    def deregister(self) -> None:
        self._ensure_token()
        self.client.delete_service(self.account_id)

    def _ensure_token(self) -> None:
        if self.client is None:
            raise ValueError("no marketplace url configured")
        now = int(self.clock())
        # renew a minute early so in-flight requests never carry a stale token
        if now + 60 < self._token_exp:
            return
        out = self.client.authenticate(self.keypair, "service", now=now)
        self._token_exp = out["exp"]

    # -- callbacks -----------------------------------------------------

    def handle_callback(self, event: dict) -> dict:
        """Apply the policy and keep the instance table in step."""
        kind = event.get("event")
        tenant = event.get("tenant")
        resource = event.get("resource")
        delegation_id = event.get("delegation_id")
        if kind not in ("subscribe", "unsubscribe") or not all(
            isinstance(v, str) and v for v in (tenant, resource, delegation_id)
        ):
            raise ValueError("malformed callback event")
        if kind == "subscribe":
            if self.policy == POLICY_REJECT:
                return {"approved": False, "reason": self.reject_reason}
            if self.policy == POLICY_DELAY:
                time.sleep(self.delay_ms / 1000.0)
            self._start_instance(tenant, resource, delegation_id)
            return {"approved": True}
        self._stop_instance(tenant, resource)
        return {"approved": True}

    def _start_instance(self, tenant: str, resource: str, delegation_id: str) -> None:
        with self._lock:
            instance = self._instances.get((tenant, resource))
            if instance is not None and instance.status == "running":
                return
            stats_dir = self.data_dir or Path(".")
            if self.data_dir:
                self.data_dir.mkdir(parents=True, exist_ok=True)
            instance = TenantInstance(
                tenant, resource, delegation_id, self.host, stats_dir / f"stats-{delegation_id}.jsonl"
            )
            instance.start(int(self.clock()))
            self._instances[(tenant, resource)] = instance

    def _stop_instance(self, tenant: str, resource: str) -> None:
        with self._lock:
            instance = self._instances.pop((tenant, resource), None)
        if instance is not None:
            instance.stop()

    def instances(self) -> list[TenantInstance]:
        with self._lock:
            return list(self._instances.values())

    def running_instance_ids(self) -> set[str]:
        with self._lock:
            return {i.instance_id for i in self._instances.values() if i.status == "running"}

    # -- usage collection ----------------------------------------------

    def tick(self) -> dict:
        """One pull-and-push cycle; returns what was sent and what failed."""
        self._generate_usage()
        batches = self._collect_batches()
        with self._lock:
            batches = self._pending_batches + batches
            self._pending_batches = []
        pushed, failed = [], []
        for records in batches:
            try:
                pushed.append(self._push_metrics(records)["batch_id"])
            except (ApiError, OSError) as exc:
                if isinstance(exc, ApiError) and 400 <= exc.status < 500:
                    # deterministic rejection: retrying cannot help
                    log.warning("dropping rejected batch: %s", exc)
                else:
                    log.warning("push failed, retrying next tick: %s", exc)
                    failed.append(records)
        with self._lock:
            self._pending_batches.extend(failed)
        quota_out = self._push_quota()
        return {"pushed": pushed, "deferred": len(failed), "quota": quota_out}

    def _push_metrics(self, records: list[dict]) -> dict:
        self._ensure_token()
        signature = self.keypair.sign(records_digest(records).encode("ascii"))
        return self.client.post_metrics(records, signature)

    def collect_and_push(self, ticks: int = 1, *, interval_s: float = 0.0) -> list[dict]:
        out = []
        for i in range(ticks):
            if i and interval_s:
                time.sleep(interval_s)
            out.append(self.tick())
        return out

    def start_ticking(self, interval_s: float) -> None:
        if self._tick_thread is not None:
            return
        self._tick_stop.clear()

        def loop():
            while not self._tick_stop.wait(interval_s):
                try:
                    self.tick()
                except Exception:
                    log.exception("usage tick failed")

        self._tick_thread = threading.Thread(target=loop, name=f"ticker-{self.name}", daemon=True)
        self._tick_thread.start()

    def stop_ticking(self) -> None:
        if self._tick_thread is None:
            return
        self._tick_stop.set()
        self._tick_thread.join(timeout=5)
        self._tick_thread = None

    def _generate_usage(self) -> None:
        for instance in self.instances():
            if instance.status != "running":
                continue
            for metric, units in self.usage_rates.get(instance.resource_name, {}).items():
                if units:
                    self.counter.add(instance.instance_id, metric, units)

    def _collect_batches(self) -> list[list[dict]]:
        """One batch per (tenant, resource) with any activity this tick."""
        batches = []
        for instance in self.instances():
            if instance.status != "running":
                continue
            rd = self.descriptions[instance.resource_name]
            records = []
            per_metric: dict[str, list] = {}
            for plugin in self.plugins:
                for metric, units, window in plugin.collect(instance):
                    per_metric.setdefault(metric, []).append((units, window))
            for metric_name in sorted(per_metric):
                definition = rd.metric(metric_name)
                if definition is None:
                    log.warning("plugin reported unknown metric %r", metric_name)
                    continue
                usage = [
                    {
                        "unitsUsed": units,
                        "charge": units * definition.rate,
                        "start_timestamp": window[0],
                        "end_timestamp": window[1],
                    }
                    for units, window in per_metric[metric_name]
                ]
                records.append(
                    {
                        "service": self.account_id,
                        "tenant": instance.tenant,
                        "resource_name": instance.resource_name,
                        "metric": definition.name,
                        "unit": definition.unit,
                        "rate": definition.rate,
                        "currency": definition.currency,
                        "usage": usage,
                    }
                )
            if records:
                batches.append(records)
        return batches

    def _push_quota(self) -> dict:
        """Consume configured quota per tick, never past the local remainder."""
        records = []
        now = int(self.clock())
        for instance in self.instances():
            if instance.status != "running":
                continue
            rd = self.descriptions[instance.resource_name]
            for attr, units in self.quota_rates.get(instance.resource_name, {}).items():
                if not units:
                    continue
                found = rd.quota_attribute(attr)
                definition, kind = found
                key = (instance.tenant, instance.resource_name, attr)
                spent = self._quota_spent.setdefault(
                    key, {"used": 0, "period_start": instance.started_at}
                )
                if kind == KIND_RENEWABLE:
                    elapsed = now - spent["period_start"]
                    if elapsed >= rd.charging_interval:
                        periods = elapsed // rd.charging_interval
                        spent["period_start"] += periods * rd.charging_interval
                        spent["used"] = 0
                take = min(units, definition.quota - spent["used"])
                if take <= 0:
                    continue
                spent["used"] += take
                records.append(
                    {
                        "service": self.account_id,
                        "tenant": instance.tenant,
                        "resource_name": instance.resource_name,
                        "quota_attribute": attr,
                        "unit": definition.unit,
                        "unitsUsed": take,
                    }
                )
        if not records:
            return {"updated": 0}
        try:
            self._ensure_token()
            return self.client.post_quota(records)
        except (ApiError, OSError) as exc:
            log.warning("quota push failed: %s", exc)
            return {"updated": 0, "error": str(exc)}
