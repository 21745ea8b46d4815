"""Shared test utilities: fake clocks, raw clusters, marketplace setup."""

from __future__ import annotations

import socket
import threading
import time

from svcmarket.ledger import LedgerNode, NodeConfig, PeerConfig


class FakeClock:
    """Settable clock; instances are drop-in replacements for time.time."""

    def __init__(self, start: float = 1_700_000_000.0):
        self._now = float(start)
        self._lock = threading.Lock()

    def __call__(self) -> float:
        with self._lock:
            return self._now

    def advance(self, seconds: float) -> None:
        with self._lock:
            self._now += seconds

    def set(self, now: float) -> None:
        with self._lock:
            self._now = float(now)


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class KvExecutor:
    """Minimal deterministic executor for consensus-only tests."""

    def init_state(self, genesis: dict) -> dict:
        return {"chain_id": genesis["chain_id"], "kv": {}, "nonces": {}}

    def execute(self, state: dict, tx) -> dict:
        if tx.payload["method"] != "set":
            return {
                "ok": False,
                "error": {"code": "NOT_FOUND", "message": "unknown method"},
                "result": None,
            }
        key = str(tx.payload["args"]["key"])
        state["kv"][key] = tx.payload["args"]["value"]
        return {"ok": True, "error": None, "result": {"key": key}}

    @staticmethod
    def execute_is_deterministic() -> bool:
        return True


TEST_GENESIS = {"chain_id": "test", "timestamp": 1_700_000_000}


def build_cluster(base_dir, n: int = 3, executor_factory=KvExecutor, genesis=None, **overrides):
    genesis = genesis or dict(TEST_GENESIS)
    ports = [free_port() for _ in range(n)]
    specs = [PeerConfig(node_id=f"n{i}", host="127.0.0.1", port=ports[i]) for i in range(n)]
    nodes = []
    for i in range(n):
        config = NodeConfig(
            node_id=f"n{i}",
            host="127.0.0.1",
            port=ports[i],
            data_dir=str(base_dir / f"n{i}"),
            genesis=genesis,
            peers=[s for s in specs if s.node_id != f"n{i}"],
            **overrides,
        )
        nodes.append(LedgerNode(config, executor_factory()))
    return nodes


def start_cluster(nodes, timeout_s: float = 15.0):
    for node in nodes:
        node.start()
    nodes[0].wait_for_leader(timeout_s=timeout_s)
    return nodes


def restart_node(node) -> LedgerNode:
    """Build a fresh node over the same data dir and config."""
    fresh = LedgerNode(node.config, type(node.executor)(), clock=node.clock)
    fresh.start()
    return fresh


def stop_all(nodes) -> None:
    for node in nodes:
        try:
            node.stop()
        except Exception:
            pass


def wait_until(predicate, timeout_s: float = 10.0, interval_s: float = 0.02, message: str = "condition"):
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        if predicate():
            return
        time.sleep(interval_s)
    raise AssertionError(f"timed out waiting for {message}")


def converged(nodes) -> bool:
    views = set()
    for node in nodes:
        status = node.status()
        views.add((status["commit_index"], status["block_hash"]))
    return len(views) == 1


def leader_of(nodes, timeout_s: float = 10.0):
    """First of ``nodes`` to report the leader role (stale ids ignored)."""
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        for node in nodes:
            if node.status()["role"] == "leader":
                return node
        time.sleep(0.02)
    raise AssertionError("no node in the given set became leader")
