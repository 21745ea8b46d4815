"""Process wiring: assemble ledger, service layer, and HTTP server.

`MarketplaceNode` is one marketplace node: a ledger node, its
orchestration layer, and a uvicorn server on a worker thread.
`LocalStack` raises a whole deployment in one process — N nodes sharing
a usage store and a settlement chain — which is what the tests, the
benchmark, and the `demo` CLI command run against.
"""

from __future__ import annotations

import json
import logging
import socket
import threading
import time
from pathlib import Path

import requests
import uvicorn

from ..contracts import MarketExecutor, make_genesis
from ..keys import KeyPair
from ..ledger import LedgerNode, NodeConfig, PeerConfig
from ..settlement import SettlementChain, settlement_app
from ..usage import UsageStore
from .http import create_app
from .service import MarketplaceService

log = logging.getLogger("svcmarket.runtime")


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class _UvicornThread:
    """A uvicorn server confined to a daemon thread."""

    def __init__(self, app, host: str, port: int):
        self.config = uvicorn.Config(
            app, host=host, port=port, log_level="error", access_log=False, lifespan="on"
        )
        self.server = uvicorn.Server(self.config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    def start(self, ready_timeout_s: float = 15.0) -> None:
        self.thread.start()
        deadline = time.monotonic() + ready_timeout_s
        while time.monotonic() < deadline:
            if self.server.started:
                return
            if not self.thread.is_alive():
                raise RuntimeError("http server thread died during startup")
            time.sleep(0.01)
        raise RuntimeError("http server did not start in time")

    def stop(self) -> None:
        self.server.should_exit = True
        self.thread.join(timeout=5)


class MarketplaceNode:
    def __init__(
        self,
        *,
        node_id: str,
        host: str,
        raft_port: int,
        api_port: int,
        data_dir: str | Path,
        genesis: dict,
        peers: list[PeerConfig],
        operator: KeyPair,
        manager: KeyPair,
        store: UsageStore,
        settlement,
        clock=time.time,
        callback_timeout_s: float = 5.0,
        commit_timeout_s: float = 15.0,
        billing_interval_s: float = 0.0,
        batch_max_txs: int = 100,
        batch_wait_ms: int = 50,
    ):
        self.node_id = node_id
        self.host = host
        self.api_port = api_port
        self.ledger = LedgerNode(
            NodeConfig(
                node_id=node_id,
                host=host,
                port=raft_port,
                data_dir=str(data_dir),
                genesis=genesis,
                peers=peers,
                batch_max_txs=batch_max_txs,
                batch_wait_ms=batch_wait_ms,
            ),
            MarketExecutor(),
            clock=clock,
        )
        self.service = MarketplaceService(
            self.ledger,
            store,
            settlement,
            operator,
            manager,
            clock=clock,
            callback_timeout_s=callback_timeout_s,
            commit_timeout_s=commit_timeout_s,
            billing_interval_s=billing_interval_s,
        )
        self.app = create_app(self.service)
        self._http = _UvicornThread(self.app, host, api_port)

    @property
    def base_url(self) -> str:
        return f"http://{self.host}:{self.api_port}"

    def start(self) -> None:
        self.ledger.start()
        self.service.start()
        self._http.start()

    def stop(self) -> None:
        self._http.stop()
        self.service.stop()
        self.ledger.stop()

    def kill(self) -> None:
        """Stop abruptly, as a crash would; on-disk state stays as-is."""
        self._http.stop()
        self.service.stop()
        self.ledger.kill()


class LocalStack:
    """A complete deployment in one process.

    N marketplace nodes (each with its own operator key and data dir)
    share one usage store and one settlement chain, like nodes of one
    provider sharing backing infrastructure.
    """

    def __init__(
        self,
        base_dir: str | Path,
        n_nodes: int = 3,
        *,
        chain_id: str = "local",
        clock=time.time,
        genesis_overrides: dict | None = None,
        callback_timeout_s: float = 5.0,
        commit_timeout_s: float = 15.0,
        billing_interval_s: float = 0.0,
        batch_wait_ms: int = 50,
        settlement_http: bool = False,
        host: str = "127.0.0.1",
    ):
        self.base_dir = Path(base_dir)
        self.base_dir.mkdir(parents=True, exist_ok=True)
        self.host = host
        self.clock = clock
        self.manager = KeyPair.generate()
        self.operators = [KeyPair.generate() for _ in range(n_nodes)]
        self.genesis = make_genesis(
            chain_id,
            int(clock()),
            self.manager.account_id,
            [op.account_id for op in self.operators],
            **(genesis_overrides or {}),
        )
        self.store = UsageStore(self.base_dir / "usage.sqlite3")
        self.settlement = SettlementChain(clock=clock)
        self.settlement_url: str | None = None
        self._settlement_http = None
        if settlement_http:
            port = free_port()
            self._settlement_http = _UvicornThread(settlement_app(self.settlement), host, port)
            self.settlement_url = f"http://{host}:{port}"

        raft_ports = [free_port() for _ in range(n_nodes)]
        api_ports = [free_port() for _ in range(n_nodes)]
        specs = [
            PeerConfig(node_id=f"node{i}", host=host, port=raft_ports[i])
            for i in range(n_nodes)
        ]
        self.nodes: list[MarketplaceNode] = []
        for i in range(n_nodes):
            peers = [p for p in specs if p.node_id != f"node{i}"]
            self.nodes.append(
                MarketplaceNode(
                    node_id=f"node{i}",
                    host=host,
                    raft_port=raft_ports[i],
                    api_port=api_ports[i],
                    data_dir=self.base_dir / f"node{i}",
                    genesis=self.genesis,
                    peers=peers,
                    operator=self.operators[i],
                    manager=self.manager,
                    store=self.store,
                    settlement=self.settlement,
                    clock=clock,
                    callback_timeout_s=callback_timeout_s,
                    commit_timeout_s=commit_timeout_s,
                    billing_interval_s=billing_interval_s,
                    batch_wait_ms=batch_wait_ms,
                )
            )

    @property
    def endpoints(self) -> list[str]:
        return [node.base_url for node in self.nodes]

    def start(self, leader_timeout_s: float = 15.0) -> None:
        if self._settlement_http is not None:
            self._settlement_http.start()
        for node in self.nodes:
            node.start()
        self.nodes[0].ledger.wait_for_leader(timeout_s=leader_timeout_s)

    def stop(self) -> None:
        for node in self.nodes:
            try:
                node.stop()
            except Exception:
                log.exception("stopping %s failed", node.node_id)
        if self._settlement_http is not None:
            self._settlement_http.stop()
        self.settlement.close()
        self.store.close()

    def leader_node(self) -> MarketplaceNode:
        leader_id = self.nodes[0].ledger.wait_for_leader()
        for node in self.nodes:
            if node.node_id == leader_id:
                return node
        raise RuntimeError(f"leader {leader_id} is not part of this stack")

    def describe(self) -> dict:
        return {
            "chain_id": self.genesis["chain_id"],
            "manager_public_key": self.manager.account_id,
            "endpoints": self.endpoints,
            "settlement_url": self.settlement_url,
            "base_dir": str(self.base_dir),
            "data_dirs": [str(self.base_dir / node.node_id) for node in self.nodes],
        }

    def write_stack_file(self) -> Path:
        path = self.base_dir / "stack.json"
        path.write_text(json.dumps(self.describe(), indent=2, sort_keys=True) + "\n")
        return path


def wait_healthy(endpoints: list[str], timeout_s: float = 15.0) -> None:
    deadline = time.monotonic() + timeout_s
    remaining = list(endpoints)
    while remaining and time.monotonic() < deadline:
        still = []
        for url in remaining:
            try:
                if requests.get(f"{url}/status", timeout=2).status_code != 200:
                    still.append(url)
            except requests.RequestException:
                still.append(url)
        remaining = still
        if remaining:
            time.sleep(0.1)
    if remaining:
        raise RuntimeError(f"endpoints never became healthy: {remaining}")
