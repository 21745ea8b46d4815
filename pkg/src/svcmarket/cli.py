"""Command-line client for the marketplace.

One subcommand per API endpoint plus key management, a local demo
stack, settlement helpers, harness control, the benchmark runner, and
offline chain verification. Every command exits 0 on success and
nonzero with the error body on failure; `--json` switches output to
single-line machine-readable JSON.

The target endpoint resolves in order: `--endpoint`, the
`SVCMARKET_ENDPOINT` environment variable, then the first endpoint in a
`stack.json` written by `demo up` (path from `--stack` or
`SVCMARKET_STACK`, defaulting to ./stack.json).
"""

from __future__ import annotations

import json
import signal
import sys
import time
from pathlib import Path

import click

from .bench import BenchPlan, BenchResult, emit_report, run_bench
from .client import ApiError, MarketClient
from .errors import OperationError
from .harness import HarnessService
from .keys import KeyPair
from .ledger import verify_chain_lines
from .ledger.store import BLOCKS_FILE
from .settlement import SettlementClient
from .usage import records_digest

ENDPOINT_ENV = "SVCMARKET_ENDPOINT"
SETTLEMENT_ENV = "SVCMARKET_SETTLEMENT"
STACK_ENV = "SVCMARKET_STACK"


class Context:
    def __init__(self):
        self.endpoint: str | None = None
        self.settlement_url: str | None = None
        self.stack_path: str | None = None
        self.as_json = False
        self._stack: dict | None = None

    def stack(self) -> dict | None:
        if self._stack is None:
            path = Path(self.stack_path or "stack.json")
            if path.exists():
                self._stack = json.loads(path.read_text())
        return self._stack

    def resolve_endpoint(self) -> str:
        if self.endpoint:
            return self.endpoint
        stack = self.stack()
        if stack and stack.get("endpoints"):
            return stack["endpoints"][0]
        raise click.UsageError(
            "no endpoint: pass --endpoint, set SVCMARKET_ENDPOINT, or run near a stack.json"
        )

    def resolve_settlement(self) -> str:
        if self.settlement_url:
            return self.settlement_url
        stack = self.stack()
        if stack and stack.get("settlement_url"):
            return stack["settlement_url"]
        raise click.UsageError(
            "no settlement endpoint: pass --settlement-url or set SVCMARKET_SETTLEMENT"
        )

    def client(self) -> MarketClient:
        return MarketClient(self.resolve_endpoint())

    def authed(self, key_path: str, role: str) -> tuple[MarketClient, KeyPair]:
        keypair = KeyPair.load(key_path)
        client = self.client()
        client.authenticate(keypair, role)
        return client, keypair

    def emit(self, data) -> None:
        if self.as_json:
            click.echo(json.dumps(data, sort_keys=True, separators=(",", ":")))
        else:
            click.echo(json.dumps(data, sort_keys=True, indent=2))


pass_context = click.make_pass_decorator(Context)


def run(call):
    """Execute an API call, mapping failures to nonzero exits."""
    try:
        return call()
    except ApiError as exc:
        click.echo(json.dumps({"error": exc.to_dict()}, sort_keys=True), err=True)
        sys.exit(1)
    except OperationError as exc:
        click.echo(json.dumps({"error": exc.to_dict()}, sort_keys=True), err=True)
        sys.exit(1)
    except OSError as exc:
        click.echo(json.dumps({"error": {"code": "UNREACHABLE", "message": str(exc)}}), err=True)
        sys.exit(2)


@click.group()
@click.option("--endpoint", "-e", envvar=ENDPOINT_ENV, help="Marketplace API base URL.")
@click.option("--settlement-url", envvar=SETTLEMENT_ENV, help="Settlement chain base URL.")
@click.option("--stack", envvar=STACK_ENV, help="Path to a demo stack.json.")
@click.option("--json", "as_json", is_flag=True, help="Single-line machine-readable output.")
@click.pass_context
def main(ctx, endpoint, settlement_url, stack, as_json):
    """Marketplace command-line client."""
    ctx.obj = Context()
    ctx.obj.endpoint = endpoint
    ctx.obj.settlement_url = settlement_url
    ctx.obj.stack_path = stack
    ctx.obj.as_json = as_json


@main.command()
@click.option("--out", type=click.Path(dir_okay=False), help="Write the key file here.")
@pass_context
def keygen(ctx, out):
    """Generate a key pair; prints the account id."""
    keypair = KeyPair.generate()
    if out:
        keypair.save(out)
        ctx.emit({"account_id": keypair.account_id, "key_file": out})
    else:
        ctx.emit({"account_id": keypair.account_id, "private_key": keypair.private_hex})


@main.command()
@click.option("--key", required=True, type=click.Path(exists=True))
@click.option("--role", required=True, type=click.Choice(["tenant", "service"]))
@pass_context
def authenticate(ctx, key, role):
    """Obtain a bearer token for the account in the key file."""
    keypair = KeyPair.load(key)
    client = ctx.client()
    ctx.emit(run(lambda: client.authenticate(keypair, role)))


@main.command()
@pass_context
def status(ctx):
    """Show node status."""
    ctx.emit(run(lambda: ctx.client().status()))


# -- tenants -------------------------------------------------------------


@main.group()
def tenant():
    """Tenant account operations."""


@tenant.command("create")
@click.option("--key", required=True, type=click.Path(exists=True))
@click.option("--name", required=True)
@click.option("--email", default="unknown@example.invalid", show_default=True)
@click.option("--phone", default="unknown", show_default=True)
@click.option("--credential", default=None, help="Settlement charging credential.")
@pass_context
def tenant_create(ctx, key, name, email, phone, credential):
    keypair = KeyPair.load(key)
    client = ctx.client()
    ctx.emit(
        run(
            lambda: client.create_tenant(
                keypair, name=name, email=email, phone=phone, charging_credential=credential
            )
        )
    )


@tenant.command("get")
@click.option("--key", required=True, type=click.Path(exists=True))
@pass_context
def tenant_get(ctx, key):
    client, keypair = run(lambda: ctx.authed(key, "tenant"))
    ctx.emit(run(lambda: client.get_tenant(keypair.account_id)))


@tenant.command("delete")
@click.option("--key", required=True, type=click.Path(exists=True))
@pass_context
def tenant_delete(ctx, key):
    client, keypair = run(lambda: ctx.authed(key, "tenant"))
    ctx.emit(run(lambda: client.delete_tenant(keypair.account_id)))


# -- services ------------------------------------------------------------


@main.group()
def service():
    """Service registration and catalog."""


@service.command("register")
@click.option("--key", required=True, type=click.Path(exists=True))
@click.option("--name", required=True)
@click.option("--resource", "resource_files", multiple=True, required=True,
              type=click.Path(exists=True), help="Resource document JSON (repeatable).")
@click.option("--callback-url", required=True)
@click.option("--service-url", required=True)
@click.option("--settlement-account", required=True)
@pass_context
def service_register(ctx, key, name, resource_files, callback_url, service_url, settlement_account):
    keypair = KeyPair.load(key)
    documents = [json.loads(Path(p).read_text()) for p in resource_files]
    client = ctx.client()
    ctx.emit(
        run(
            lambda: client.create_service(
                keypair,
                name=name,
                callback_url=callback_url,
                service_url=service_url,
                settlement_account=settlement_account,
                resource_documents=documents,
            )
        )
    )


@service.command("list")
@click.option("--offset", type=int, default=None)
@click.option("--limit", type=int, default=None)
@pass_context
def service_list(ctx, offset, limit):
    ctx.emit(run(lambda: ctx.client().list_services(offset=offset, limit=limit)))


@service.command("get")
@click.argument("account")
@pass_context
def service_get(ctx, account):
    ctx.emit(run(lambda: ctx.client().get_service(account)))


@service.command("deregister")
@click.option("--key", required=True, type=click.Path(exists=True))
@pass_context
def service_deregister(ctx, key):
    client, keypair = run(lambda: ctx.authed(key, "service"))
    ctx.emit(run(lambda: client.delete_service(keypair.account_id)))


# -- grants and delegations ------------------------------------------------


@main.command()
@click.option("--key", required=True, type=click.Path(exists=True))
@click.option("--service", "service_id", required=True)
@click.option("--resource", required=True)
@click.option("--duration-s", type=int, default=None)
@click.option("--subdelegations", type=int, default=None)
@pass_context
def grant(ctx, key, service_id, resource, duration_s, subdelegations):
    """Request a resource grant token."""
    client, _ = run(lambda: ctx.authed(key, "tenant"))
    ctx.emit(
        run(
            lambda: client.create_grant(
                service_id, resource, duration_s=duration_s, subdelegations=subdelegations
            )
        )
    )


@main.command()
@click.option("--key", required=True, type=click.Path(exists=True))
@click.option("--service", "service_id", required=True)
@click.option("--resource", required=True)
@click.option("--duration-s", type=int, default=None)
@click.option("--subdelegations", type=int, default=None)
@pass_context
def subscribe(ctx, key, service_id, resource, duration_s, subdelegations):
    """Grant, acceptance, and delegation in one step."""
    client, keypair = run(lambda: ctx.authed(key, "tenant"))
    ctx.emit(
        run(
            lambda: client.subscribe(
                keypair, service_id, resource, duration_s=duration_s, subdelegations=subdelegations
            )
        )
    )


@main.group()
def delegation():
    """Subscription management."""


@delegation.command("list")
@click.option("--key", required=True, type=click.Path(exists=True))
@pass_context
def delegation_list(ctx, key):
    client, _ = run(lambda: ctx.authed(key, "tenant"))
    ctx.emit(run(lambda: client.list_delegations()))


@delegation.command("delete")
@click.option("--key", required=True, type=click.Path(exists=True))
@click.option("--service", "service_id", required=True)
@click.option("--resource", required=True)
@pass_context
def delegation_delete(ctx, key, service_id, resource):
    client, _ = run(lambda: ctx.authed(key, "tenant"))
    ctx.emit(run(lambda: client.delete_delegation(service_id, resource)))


# -- usage -----------------------------------------------------------------


@main.group()
def usage():
    """Usage records and queries."""


@usage.command("post-metrics")
@click.option("--key", required=True, type=click.Path(exists=True))
@click.option("--records", "records_file", required=True, type=click.Path(exists=True))
@pass_context
def usage_post_metrics(ctx, key, records_file):
    """Sign and push a metric record batch (service role)."""
    client, keypair = run(lambda: ctx.authed(key, "service"))
    records = json.loads(Path(records_file).read_text())
    signature = keypair.sign(records_digest(records).encode("ascii"))
    ctx.emit(run(lambda: client.post_metrics(records, signature)))


@usage.command("post-quota")
@click.option("--key", required=True, type=click.Path(exists=True))
@click.option("--records", "records_file", required=True, type=click.Path(exists=True))
@pass_context
def usage_post_quota(ctx, key, records_file):
    client, _ = run(lambda: ctx.authed(key, "service"))
    records = json.loads(Path(records_file).read_text())
    ctx.emit(run(lambda: client.post_quota(records)))


@usage.command("metrics")
@click.option("--key", required=True, type=click.Path(exists=True))
@click.option("--service", "service_id", required=True)
@click.option("--resource", required=True)
@click.option("--mode", type=click.Choice(["consolidated", "detailed"]), default="consolidated",
              show_default=True)
@click.option("--start", type=int, default=0, show_default=True)
@click.option("--end", type=int, default=None, help="Defaults to now.")
@pass_context
def usage_metrics(ctx, key, service_id, resource, mode, start, end):
    client, _ = run(lambda: ctx.authed(key, "tenant"))
    if end is None:
        end = int(time.time()) + 1
    ctx.emit(run(lambda: client.query_metrics(service_id, resource, mode, start, end)))


@usage.command("quota")
@click.option("--key", required=True, type=click.Path(exists=True))
@click.option("--service", "service_id", required=True)
@click.option("--resource", required=True)
@pass_context
def usage_quota(ctx, key, service_id, resource):
    client, _ = run(lambda: ctx.authed(key, "tenant"))
    ctx.emit(run(lambda: client.query_quota(service_id, resource)))


@usage.command("integrity")
@click.option("--key", required=True, type=click.Path(exists=True))
@click.option("--role", type=click.Choice(["tenant", "service"]), default="service",
              show_default=True)
@click.option("--service", "service_id", default=None)
@pass_context
def usage_integrity(ctx, key, role, service_id):
    client, _ = run(lambda: ctx.authed(key, role))
    ctx.emit(run(lambda: client.usage_integrity(service_id)))


# -- billing ---------------------------------------------------------------


@main.command()
@click.option("--key", required=True, type=click.Path(exists=True))
@click.option("--role", type=click.Choice(["tenant", "service"]), default="tenant",
              show_default=True)
@click.option("--service", "service_id", default=None)
@click.option("--resource", default=None)
@click.option("--paid/--unpaid", "paid", default=None)
@click.option("--bill-id", default=None)
@pass_context
def bills(ctx, key, role, service_id, resource, paid, bill_id):
    """List bills visible to the account."""
    client, _ = run(lambda: ctx.authed(key, role))
    ctx.emit(
        run(
            lambda: client.list_bills(
                service=service_id, resource=resource, paid=paid, bill_id=bill_id
            )
        )
    )


@main.command()
@click.option("--key", required=True, type=click.Path(exists=True))
@click.option("--bill-id", required=True)
@click.option("--currency", required=True)
@click.option("--amount", required=True, type=int)
@pass_context
def pay(ctx, key, bill_id, currency, amount):
    """Register a payment for a bill (tenant role).

    The marketplace then watches the settlement chain for a matching
    transfer; use `settlement transfer` to move the funds.
    """
    client, _ = run(lambda: ctx.authed(key, "tenant"))
    ctx.emit(run(lambda: client.register_payment(bill_id, currency, amount)))


# -- settlement ------------------------------------------------------------


@main.group()
def settlement():
    """Settlement chain helpers."""


@settlement.command("faucet")
@click.option("--address", required=True)
@click.option("--balance", type=int, default=0, show_default=True)
@pass_context
def settlement_faucet(ctx, address, balance):
    """Create a settlement account with an initial balance."""
    chain = SettlementClient(ctx.resolve_settlement())
    try:
        ctx.emit({"address": run(lambda: chain.create_account(address, balance))})
    finally:
        chain.close()


@settlement.command("balance")
@click.argument("address")
@pass_context
def settlement_balance(ctx, address):
    chain = SettlementClient(ctx.resolve_settlement())
    try:
        ctx.emit({"address": address, "balance": run(lambda: chain.balance(address))})
    finally:
        chain.close()


@settlement.command("transfer")
@click.option("--source", required=True)
@click.option("--destination", required=True)
@click.option("--amount", required=True, type=int)
@pass_context
def settlement_transfer(ctx, source, destination, amount):
    chain = SettlementClient(ctx.resolve_settlement())
    try:
        ctx.emit(run(lambda: chain.transfer(source, destination, amount)))
    finally:
        chain.close()


@settlement.command("events")
@click.option("--after", type=int, default=-1, show_default=True)
@pass_context
def settlement_events(ctx, after):
    chain = SettlementClient(ctx.resolve_settlement())
    try:
        ctx.emit({"events": run(lambda: chain.events_after(after))})
    finally:
        chain.close()


# -- demo stack --------------------------------------------------------------


@main.group()
def demo():
    """Local demonstration stack."""


@demo.command("up")
@click.option("--dir", "base_dir", required=True, type=click.Path(file_okay=False))
@click.option("--nodes", type=int, default=3, show_default=True)
@click.option("--settlement-http/--no-settlement-http", default=True, show_default=True)
@pass_context
def demo_up(ctx, base_dir, nodes, settlement_http):
    """Run a local cluster until interrupted; writes <dir>/stack.json."""
    from .market import LocalStack

    stack = LocalStack(base_dir, n_nodes=nodes, settlement_http=settlement_http)
    stack.start()
    stack.write_stack_file()
    ctx.emit(stack.describe())
    stop = {"flag": False}

    def on_signal(signum, frame):
        stop["flag"] = True

    signal.signal(signal.SIGINT, on_signal)
    signal.signal(signal.SIGTERM, on_signal)
    try:
        while not stop["flag"]:
            time.sleep(0.2)
    finally:
        stack.stop()


# -- harness -----------------------------------------------------------------


@main.group()
def harness():
    """Mock service harness."""


@harness.command("run")
@click.option("--config", "config_file", required=True, type=click.Path(exists=True))
@click.option("--marketplace", default=None, help="Override the marketplace URL.")
@click.option("--ticks", type=int, default=None,
              help="Run this many usage ticks and exit; default runs until interrupted.")
@pass_context
def harness_run(ctx, config_file, marketplace, ticks):
    """Register a harness service and collect usage."""
    service = HarnessService.from_config(config_file)
    url = marketplace or (service.client.base_url if service.client else None) or ctx.resolve_endpoint()
    run(lambda: service.register_with_marketplace(url))
    ctx.emit(
        {
            "account_id": service.account_id,
            "service_url": service.service_url,
            "callback_url": service.callback_url,
        }
    )
    try:
        if ticks is not None:
            results = run(lambda: service.collect_and_push(ticks, interval_s=service.tick_s))
            ctx.emit({"ticks": results})
        else:
            service.start_ticking(service.tick_s)
            stop = {"flag": False}
            signal.signal(signal.SIGINT, lambda *a: stop.update(flag=True))
            signal.signal(signal.SIGTERM, lambda *a: stop.update(flag=True))
            while not stop["flag"]:
                time.sleep(0.2)
    finally:
        service.stop()


# -- bench -------------------------------------------------------------------


@main.group()
def bench():
    """Benchmark runner and report generator."""


@bench.command("run")
@click.option("--operation", required=True)
@click.option("--counts", required=True, help="Comma-separated ascending counts.")
@click.option("--regime", required=True, type=click.Choice(["sequential", "random"]))
@click.option("--nodes", default=None, help="Comma-separated endpoints; defaults to the stack.")
@click.option("--runs", type=int, default=2, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--fixture", default="small-process", show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@pass_context
def bench_run(ctx, operation, counts, regime, nodes, runs, seed, fixture, out):
    if nodes:
        node_list = tuple(n.strip() for n in nodes.split(",") if n.strip())
    else:
        stack = ctx.stack()
        node_list = tuple(stack["endpoints"]) if stack else (ctx.resolve_endpoint(),)
    try:
        plan = BenchPlan(
            operation=operation,
            counts=tuple(int(c) for c in counts.split(",")),
            regime=regime,
            nodes=node_list,
            runs=runs,
        )
    except ValueError as exc:
        raise click.UsageError(str(exc))
    result = run(lambda: run_bench(plan, seed=seed, resource_fixture=fixture))
    paths = emit_report(result, out)
    ctx.emit({"written": [str(p) for p in paths], "aborted": [
        f"{c.operation}/{c.count}/{c.regime}" for c in result.cells if c.status == "ABORTED"
    ]})
    if any(cell.status == "ABORTED" for cell in result.cells):
        sys.exit(3)


@bench.command("report")
@click.option("--raw", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@pass_context
def bench_report(ctx, raw, out):
    """Re-emit CSV reports from a saved raw result."""
    result = BenchResult.load(raw)
    paths = emit_report(result, out)
    ctx.emit({"written": [str(p) for p in paths]})


# -- chain -------------------------------------------------------------------


@main.group()
def chain():
    """Ledger inspection."""


@chain.command("verify")
@click.option("--data-dir", required=True, type=click.Path(exists=True, file_okay=False))
@pass_context
def chain_verify(ctx, data_dir):
    """Re-verify a node's block log from its raw bytes on disk."""
    path = Path(data_dir) / BLOCKS_FILE
    if not path.exists():
        raise click.UsageError(f"no block log at {path}")
    lines = path.read_bytes().splitlines()
    report = verify_chain_lines(lines, 0, len(lines) - 1)
    ctx.emit(report.to_dict())
    if not report.valid:
        sys.exit(1)


if __name__ == "__main__":
    main()
