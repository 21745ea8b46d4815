"""Leader-based replicated ledger node.

Consensus is a simplified crash-fault-tolerant protocol in the RAFT
family: randomized election timeouts, terms, majority append
acknowledgment before commit, and the current-term commit rule. Log
compaction, snapshots, and membership changes are omitted.

Each node is one logical state machine: committed blocks are applied
strictly in order under a single lock; network threads funnel every
mutation through that lock. Transaction execution is delegated to an
executor object and must be deterministic, so every node reaches the
same state root at every height.

Durability: log entries are fsynced before they are acknowledged, and
(current_term, voted_for, commit_index) are fsynced on change, so a
single crashed-and-restarted node rejoins without losing committed
data.
"""

from __future__ import annotations

import copy
import logging
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..canonical import digest
from ..errors import (
    INVALID_SIGNATURE,
    NO_LEADER,
    NOT_FOUND,
    OUT_OF_RANGE,
    STALE_NONCE,
    OperationError,
)
from .store import BlockStore, VerificationReport, verify_chain_lines
from .types import Block, Transaction, check_block, check_transaction, make_block
from .transport import RpcClient, RpcServer, TransportError

log = logging.getLogger(__name__)

ROLE_FOLLOWER = "follower"
ROLE_CANDIDATE = "candidate"
ROLE_LEADER = "leader"

_TICK_S = 0.01
_RPC_TIMEOUT_S = 0.5
_MAX_ENTRIES_PER_MSG = 50


@dataclass(frozen=True)
class PeerConfig:
    node_id: str
    host: str
    port: int


@dataclass
class NodeConfig:
    node_id: str
    host: str
    port: int
    data_dir: str
    genesis: dict
    peers: list[PeerConfig] = field(default_factory=list)
    batch_max_txs: int = 100
    batch_wait_ms: int = 50
    heartbeat_ms: int = 50
    election_timeout_ms: tuple[int, int] = (150, 300)

    @classmethod
    def from_dict(cls, d: dict) -> "NodeConfig":
        peers = [PeerConfig(**p) for p in d.get("peers", [])]
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        kwargs = {k: v for k, v in d.items() if k in known and k != "peers"}
        if "election_timeout_ms" in kwargs:
            kwargs["election_timeout_ms"] = tuple(kwargs["election_timeout_ms"])
        return cls(peers=peers, **kwargs)


def apply_transactions(state: dict, transactions, executor) -> list[dict]:
    """Execute transactions against ``state`` in order; returns receipts.

    Per-transaction rules, applied identically on every node:
    - the signature and content hash must verify;
    - the nonce must be exactly the sender's last committed nonce + 1
      (the nonce advances even when the business operation fails, so a
      failed call still consumes its sequence slot);
    - business failures leave all state except the nonce unchanged.
    """
    receipts = []
    nonces = state.setdefault("nonces", {})
    for tx in transactions:
        try:
            check_transaction(tx)
        except OperationError as exc:
            receipts.append({"ok": False, "error": exc.to_dict(), "result": None})
            continue
        last = nonces.get(tx.sender, 0)
        if tx.nonce != last + 1:
            receipts.append(
                {
                    "ok": False,
                    "error": {
                        "code": STALE_NONCE,
                        "message": f"nonce {tx.nonce}, expected {last + 1}",
                    },
                    "result": None,
                }
            )
            continue
        nonces[tx.sender] = tx.nonce
        receipts.append(executor.execute(state, tx))
    return receipts


def apply_block(state: dict, block: Block, executor) -> tuple[str, list[dict]]:
    receipts = apply_transactions(state, block.transactions, executor)
    return digest(state), receipts


class LedgerNode:
    """One cluster member: consensus, storage, and execution."""

    def __init__(self, config: NodeConfig, executor, clock=time.time):
        self.config = config
        self.executor = executor
        self.clock = clock
        self.node_id = config.node_id

        self._lock = threading.RLock()
        self._commit_cv = threading.Condition(self._lock)
        self._seal_cv = threading.Condition(self._lock)

        self.store = BlockStore(config.data_dir)
        self.log: list[Block] = []
        self.log_terms: list[int] = []
        self.role = ROLE_FOLLOWER
        self.leader_id: str | None = None
        self.commit_index = -1
        self.state: dict = {}
        self._results: dict[str, dict] = {}
        self._tx_block: dict[str, int] = {}
        self._log_tx_hashes: set[str] = set()
        self._pool: list[Transaction] = []
        self._pool_hashes: set[str] = set()
        self._pool_since: float | None = None
        self._spec_state: dict | None = None

        self._peers = {p.node_id: p for p in config.peers}
        self._clients = {
            p.node_id: RpcClient(p.host, p.port, timeout_s=_RPC_TIMEOUT_S)
            for p in config.peers
        }
        self._next_index: dict[str, int] = {}
        self._match_index: dict[str, int] = {}
        self._repl_events = {p: threading.Event() for p in self._peers}

        self._running = False
        self._threads: list[threading.Thread] = []
        self._server: RpcServer | None = None
        self._election_deadline = 0.0

        self._recover()

    # -- lifecycle ---------------------------------------------------------

    def _recover(self) -> None:
        meta = self.store.load_raft_state()
        self.current_term = meta["current_term"]
        self.voted_for = meta["voted_for"]
        blocks, terms = self.store.load_entries()
        self.state = self.executor.init_state(self.config.genesis)
        self.state.setdefault("nonces", {})
        if not blocks:
            genesis = make_block(
                index=0,
                parent_hash="0" * 64,
                transactions=[],
                state_root=digest(self.state),
                timestamp=int(self.config.genesis["timestamp"]),
            )
            self.store.append_entry(genesis, 0)
            blocks, terms = [genesis], [0]
            meta["commit_index"] = 0
            self.store.save_raft_state(self.current_term, self.voted_for, 0)
        expected_root = digest(self.state)
        if blocks[0].state_root != expected_root:
            raise RuntimeError("stored genesis does not match configured genesis document")
        self.log = blocks
        self.log_terms = terms
        self._log_tx_hashes = {tx.tx_hash for b in blocks for tx in b.transactions}
        self.commit_index = 0
        replay_to = min(meta["commit_index"], len(blocks) - 1)
        for block in blocks[1 : replay_to + 1]:
            self._apply_committed(block)
        self.commit_index = max(0, replay_to)

    def start(self) -> None:
        self._running = True
        self._server = RpcServer(self.config.host, self.config.port, self._handle_rpc)
        self._server.start()
        self._reset_election_timer()
        self._spawn(self._election_loop, "elect")
        self._spawn(self._seal_loop, "seal")
        for peer_id in self._peers:
            self._spawn(lambda p=peer_id: self._replication_loop(p), f"repl-{peer_id}")

    def _spawn(self, target, name: str) -> None:
        thread = threading.Thread(target=target, name=f"{self.node_id}-{name}", daemon=True)
        thread.start()
        self._threads.append(thread)

    def stop(self) -> None:
        with self._lock:
            self._running = False
            self._seal_cv.notify_all()
            self._commit_cv.notify_all()
        if self._server is not None:
            self._server.stop()
        for event in self._repl_events.values():
            event.set()
        for thread in self._threads:
            thread.join(timeout=2.0)
        for client in self._clients.values():
            client.close()
        self.store.close()

    # `stop` already discards all volatile state; a crash loses nothing more
    # because entries and consensus metadata are fsynced before use.
    kill = stop

    # -- public API ---------------------------------------------------------

    def submit_transaction(self, tx: Transaction | dict, forwarded: bool = False) -> dict:
        if isinstance(tx, dict):
            try:
                tx = Transaction.from_dict(tx)
            except ValueError as exc:
                raise OperationError(INVALID_SIGNATURE, f"malformed transaction: {exc}")
        check_transaction(tx)
        forward_to: str | None = None
        with self._lock:
            known = self._receipt_locked(tx.tx_hash)
            if known is not None:
                return known
            if self.role == ROLE_LEADER:
                last = self.state["nonces"].get(tx.sender, 0)
                if tx.nonce <= last:
                    raise OperationError(
                        STALE_NONCE, f"nonce {tx.nonce} <= last committed {last}"
                    )
                self._pool.append(tx)
                self._pool_hashes.add(tx.tx_hash)
                if self._pool_since is None:
                    self._pool_since = time.monotonic()
                self._seal_cv.notify_all()
                return {"tx_hash": tx.tx_hash, "status": "pending"}
            if forwarded or self.leader_id is None or self.leader_id not in self._clients:
                raise OperationError(NO_LEADER, "no elected leader reachable")
            forward_to = self.leader_id
        try:
            reply = self._clients[forward_to].call(
                {"type": "submit_tx", "tx": tx.to_dict(), "forwarded": True},
                timeout_s=2.0,
            )
        except TransportError as exc:
            raise OperationError(NO_LEADER, f"leader unreachable: {exc}") from exc
        if reply.get("ok"):
            return reply["receipt"]
        err = reply.get("error") or {}
        raise OperationError(err.get("code", NO_LEADER), err.get("message", "submit failed"))

    def submit_and_wait(self, tx: Transaction | dict, timeout_s: float = 10.0) -> dict:
        """Submit, then block until the transaction commits locally."""
        receipt = self.submit_transaction(tx)
        if receipt["status"] == "committed":
            return receipt
        tx_hash = receipt["tx_hash"]
        deadline = time.monotonic() + timeout_s
        with self._commit_cv:
            while self._running:
                if tx_hash in self._results:
                    return dict(self._results[tx_hash])
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                self._commit_cv.wait(timeout=min(remaining, 0.25))
        raise OperationError(NO_LEADER, f"transaction {tx_hash[:12]} did not commit in time")

    def get_receipt(self, tx_hash: str) -> dict:
        with self._lock:
            receipt = self._receipt_locked(tx_hash)
        if receipt is None:
            raise OperationError(NOT_FOUND, "unknown transaction")
        return receipt

    def _receipt_locked(self, tx_hash: str) -> dict | None:
        if tx_hash in self._results:
            return dict(self._results[tx_hash])
        if tx_hash in self._pool_hashes or tx_hash in self._log_tx_hashes:
            return {"tx_hash": tx_hash, "status": "pending"}
        return None

    def get_transaction(self, tx_hash: str) -> tuple[dict, int]:
        """Committed transaction plus its block index (the inclusion proof)."""
        with self._lock:
            index = self._tx_block.get(tx_hash)
            if index is None:
                raise OperationError(NOT_FOUND, "transaction not committed")
            for tx in self.log[index].transactions:
                if tx.tx_hash == tx_hash:
                    return tx.to_dict(), index
        raise OperationError(NOT_FOUND, "transaction not committed")

    def get_block(self, index: int) -> dict:
        with self._lock:
            if not 0 <= index <= self.commit_index:
                raise OperationError(OUT_OF_RANGE, f"no committed block {index}")
            return self.log[index].to_dict()

    def verify_chain(self, from_index: int, to_index: int) -> VerificationReport:
        """Re-verify committed blocks from their on-disk representation."""
        with self._lock:
            commit = self.commit_index
        if not 0 <= from_index <= to_index <= commit:
            raise OperationError(
                OUT_OF_RANGE, f"range [{from_index}, {to_index}] outside committed [0, {commit}]"
            )
        lines = self.store.read_raw_lines()
        return verify_chain_lines(lines, from_index, to_index)

    def status(self) -> dict:
        with self._lock:
            last = self.log[self.commit_index]
            return {
                "node_id": self.node_id,
                "role": self.role,
                "term": self.current_term,
                "leader_id": self.leader_id,
                "commit_index": self.commit_index,
                "log_length": len(self.log),
                "block_hash": last.block_hash,
                "state_root": last.state_root,
            }

    def with_state(self, fn):
        """Run a read-only function against the committed state, serialized."""
        with self._lock:
            return fn(self.state)

    @property
    def is_leader(self) -> bool:
        with self._lock:
            return self.role == ROLE_LEADER

    def wait_for_leader(self, timeout_s: float = 5.0) -> str:
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            with self._lock:
                if self.leader_id is not None:
                    return self.leader_id
            time.sleep(0.01)
        raise OperationError(NO_LEADER, "no leader elected in time")

    def reserved_nonce_floor(self, sender: str) -> int:
        """Highest nonce for sender anywhere: committed state, log, or pool.

        Allocating above this floor avoids colliding with transactions
        still in flight after a restart.
        """
        with self._lock:
            floor = self.state["nonces"].get(sender, 0)
            for block in self.log[self.commit_index + 1 :]:
                for tx in block.transactions:
                    if tx.sender == sender and tx.nonce > floor:
                        floor = tx.nonce
            for tx in self._pool:
                if tx.sender == sender and tx.nonce > floor:
                    floor = tx.nonce
        return floor

    def sync_with_leader(self, timeout_s: float = 2.0) -> None:
        """Wait until local commit reaches the leader's current commit.

        Gives followers read-your-writes across nodes: a client that saw
        a write acknowledged anywhere sees its effects here afterwards.
        Best-effort; an unreachable leader degrades to a local read.
        """
        with self._lock:
            if self.role == ROLE_LEADER:
                return
            leader = self.leader_id
            client = self._clients.get(leader) if leader else None
        if client is None:
            return
        try:
            reply = client.call({"type": "get_status"}, timeout_s=0.5)
        except TransportError:
            return
        if not reply.get("ok"):
            return
        target = int(reply.get("status", {}).get("commit_index", 0))
        deadline = time.monotonic() + timeout_s
        with self._commit_cv:
            while self._running and self.commit_index < target:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return
                self._commit_cv.wait(timeout=min(remaining, 0.1))

    # -- consensus: elections -----------------------------------------------

    def _reset_election_timer(self) -> None:
        low, high = self.config.election_timeout_ms
        self._election_deadline = time.monotonic() + random.uniform(low, high) / 1000.0

    def _election_loop(self) -> None:
        while self._running:
            time.sleep(_TICK_S)
            with self._lock:
                if not self._running or self.role == ROLE_LEADER:
                    continue
                if time.monotonic() < self._election_deadline:
                    continue
                self.role = ROLE_CANDIDATE
                self.current_term += 1
                self.voted_for = self.node_id
                self.leader_id = None
                self.store.save_raft_state(self.current_term, self.voted_for, self.commit_index)
                self._reset_election_timer()
                term = self.current_term
                last_index = len(self.log) - 1
                last_term = self.log_terms[-1]
            self._run_election(term, last_index, last_term)

    def _run_election(self, term: int, last_index: int, last_term: int) -> None:
        votes = 1
        needed = (len(self._peers) + 1) // 2 + 1
        if votes >= needed:
            with self._lock:
                if self.role == ROLE_CANDIDATE and self.current_term == term:
                    self._become_leader()
            return
        replies: list[dict] = []
        replies_lock = threading.Lock()
        done = threading.Event()

        def ask(peer_id: str) -> None:
            try:
                reply = self._clients[peer_id].call(
                    {
                        "type": "request_vote",
                        "term": term,
                        "candidate_id": self.node_id,
                        "last_log_index": last_index,
                        "last_log_term": last_term,
                    }
                )
            except TransportError:
                reply = None
            with replies_lock:
                replies.append(reply or {})
                done.set()

        for peer_id in self._peers:
            threading.Thread(target=ask, args=(peer_id,), daemon=True).start()
        deadline = time.monotonic() + 0.3
        seen = 0
        while time.monotonic() < deadline:
            done.wait(timeout=0.02)
            done.clear()
            with replies_lock:
                batch, seen = replies[seen:], len(replies)
            for reply in batch:
                with self._lock:
                    if reply.get("term", 0) > self.current_term:
                        self._step_down(reply["term"])
                        return
                    if (
                        reply.get("vote_granted")
                        and self.role == ROLE_CANDIDATE
                        and self.current_term == term
                    ):
                        votes += 1
                        if votes >= needed:
                            self._become_leader()
                            return
            if seen == len(self._peers):
                return

    def _become_leader(self) -> None:
        # caller holds the lock
        self.role = ROLE_LEADER
        self.leader_id = self.node_id
        for peer_id in self._peers:
            self._next_index[peer_id] = len(self.log)
            self._match_index[peer_id] = -1
        self._rebuild_spec_state()
        log.info("%s: leader for term %d at height %d", self.node_id, self.current_term, len(self.log) - 1)
        for event in self._repl_events.values():
            event.set()
        self._seal_cv.notify_all()

    def _step_down(self, term: int) -> None:
        # caller holds the lock
        if term > self.current_term:
            self.current_term = term
            self.voted_for = None
            self.store.save_raft_state(self.current_term, self.voted_for, self.commit_index)
        if self.role == ROLE_LEADER:
            log.info("%s: lost leadership at term %d", self.node_id, term)
        self.role = ROLE_FOLLOWER
        self._spec_state = None
        self._reset_election_timer()

    # -- consensus: replication ----------------------------------------------

    def _replication_loop(self, peer_id: str) -> None:
        event = self._repl_events[peer_id]
        while self._running:
            event.wait(timeout=self.config.heartbeat_ms / 1000.0)
            event.clear()
            if not self._running:
                return
            with self._lock:
                if self.role != ROLE_LEADER:
                    continue
                term = self.current_term
                next_index = self._next_index[peer_id]
                prev_index = next_index - 1
                prev_term = self.log_terms[prev_index]
                entries = [
                    {"block": b.to_dict(), "term": t}
                    for b, t in zip(
                        self.log[next_index : next_index + _MAX_ENTRIES_PER_MSG],
                        self.log_terms[next_index : next_index + _MAX_ENTRIES_PER_MSG],
                    )
                ]
                message = {
                    "type": "append_entries",
                    "term": term,
                    "leader_id": self.node_id,
                    "prev_log_index": prev_index,
                    "prev_log_term": prev_term,
                    "entries": entries,
                    "leader_commit": self.commit_index,
                }
            try:
                reply = self._clients[peer_id].call(message)
            except TransportError:
                continue
            with self._lock:
                if not self._running or self.role != ROLE_LEADER or self.current_term != term:
                    continue
                if reply.get("term", 0) > self.current_term:
                    self._step_down(reply["term"])
                    continue
                if reply.get("success"):
                    match = int(reply.get("match_index", prev_index))
                    self._match_index[peer_id] = max(self._match_index[peer_id], match)
                    self._next_index[peer_id] = self._match_index[peer_id] + 1
                    self._advance_commit()
                    # a restarted follower may know a commit index this new
                    # leader has not re-derived yet; adopt it (committed
                    # entries are unique per index, so this is safe)
                    follower_commit = int(reply.get("commit_index", -1))
                    if follower_commit > self.commit_index:
                        self._commit_to(min(follower_commit, len(self.log) - 1))
                    if self._next_index[peer_id] < len(self.log):
                        event.set()
                else:
                    conflict = int(reply.get("conflict_index", max(1, prev_index)))
                    self._next_index[peer_id] = max(1, min(conflict, len(self.log) - 1 + 1))
                    event.set()

    def _advance_commit(self) -> None:
        # caller holds the lock; current-term commit rule
        indices = sorted(
            [len(self.log) - 1] + [self._match_index[p] for p in self._peers], reverse=True
        )
        majority = (len(self._peers) + 1) // 2 + 1
        candidate = indices[majority - 1]
        if candidate > self.commit_index and self.log_terms[candidate] == self.current_term:
            self._commit_to(candidate)

    def _commit_to(self, new_commit: int) -> None:
        # caller holds the lock
        for index in range(self.commit_index + 1, new_commit + 1):
            self._apply_committed(self.log[index])
        self.commit_index = new_commit
        self.store.save_raft_state(self.current_term, self.voted_for, self.commit_index)
        self._commit_cv.notify_all()
        self._seal_cv.notify_all()
        for event in self._repl_events.values():
            event.set()

    def _apply_committed(self, block: Block) -> None:
        state_root, receipts = apply_block(self.state, block, self.executor)
        if state_root != block.state_root:
            raise RuntimeError(
                f"{self.node_id}: non-deterministic execution at block {block.index}: "
                f"{state_root} != {block.state_root}"
            )
        for tx, receipt in zip(block.transactions, receipts):
            self._results[tx.tx_hash] = {
                "tx_hash": tx.tx_hash,
                "status": "committed",
                "block_index": block.index,
                **receipt,
            }
            self._tx_block[tx.tx_hash] = block.index

    # -- consensus: follower message handling ---------------------------------

    def _handle_rpc(self, message: dict) -> dict:
        kind = message.get("type")
        if kind == "append_entries":
            return self._handle_append_entries(message)
        if kind == "request_vote":
            return self._handle_request_vote(message)
        if kind == "submit_tx":
            try:
                receipt = self.submit_transaction(
                    message.get("tx", {}), forwarded=bool(message.get("forwarded"))
                )
                return {"ok": True, "receipt": receipt}
            except OperationError as exc:
                return {"ok": False, "error": exc.to_dict()}
        if kind == "get_status":
            return {"ok": True, "status": self.status()}
        if kind == "get_receipt":
            try:
                return {"ok": True, "receipt": self.get_receipt(message.get("tx_hash", ""))}
            except OperationError as exc:
                return {"ok": False, "error": exc.to_dict()}
        if kind == "get_block":
            try:
                return {"ok": True, "block": self.get_block(int(message.get("index", -1)))}
            except OperationError as exc:
                return {"ok": False, "error": exc.to_dict()}
        return {"ok": False, "error": {"code": NOT_FOUND, "message": f"unknown rpc {kind!r}"}}

    def _handle_request_vote(self, message: dict) -> dict:
        with self._lock:
            term = int(message["term"])
            if term > self.current_term:
                self._step_down(term)
            granted = False
            if term == self.current_term and self.role != ROLE_LEADER:
                mine = (self.log_terms[-1], len(self.log) - 1)
                theirs = (int(message["last_log_term"]), int(message["last_log_index"]))
                if self.voted_for in (None, message["candidate_id"]) and theirs >= mine:
                    granted = True
                    if self.voted_for is None:
                        self.voted_for = message["candidate_id"]
                        self.store.save_raft_state(
                            self.current_term, self.voted_for, self.commit_index
                        )
                    self._reset_election_timer()
            return {"term": self.current_term, "vote_granted": granted}

    def _handle_append_entries(self, message: dict) -> dict:
        with self._lock:
            term = int(message["term"])
            if term < self.current_term:
                return {"term": self.current_term, "success": False}
            if term > self.current_term or self.role != ROLE_FOLLOWER:
                self._step_down(term)
            self.leader_id = message["leader_id"]
            self._reset_election_timer()

            prev_index = int(message["prev_log_index"])
            prev_term = int(message["prev_log_term"])
            if prev_index >= len(self.log):
                return {
                    "term": self.current_term,
                    "success": False,
                    "conflict_index": len(self.log),
                }
            if self.log_terms[prev_index] != prev_term:
                conflict_term = self.log_terms[prev_index]
                first = prev_index
                while first > 1 and self.log_terms[first - 1] == conflict_term:
                    first -= 1
                return {
                    "term": self.current_term,
                    "success": False,
                    "conflict_index": first,
                }

            index = prev_index + 1
            for entry in message["entries"]:
                entry_term = int(entry["term"])
                if index < len(self.log):
                    if self.log_terms[index] == entry_term:
                        index += 1
                        continue
                    self._truncate_from(index)
                block = Block.from_dict(entry["block"])
                check_block(block, self.log[index - 1].block_hash, verify_signatures=False)
                if block.index != index:
                    raise RuntimeError(f"{self.node_id}: entry index skew at {index}")
                self.store.append_entry(block, entry_term)
                self.log.append(block)
                self.log_terms.append(entry_term)
                self._log_tx_hashes.update(tx.tx_hash for tx in block.transactions)
                self._drop_from_pool(block.transactions)
                index += 1

            leader_commit = int(message["leader_commit"])
            if leader_commit > self.commit_index:
                self._commit_to(min(leader_commit, len(self.log) - 1))
            return {
                "term": self.current_term,
                "success": True,
                "match_index": len(self.log) - 1,
                "commit_index": self.commit_index,
            }

    def _truncate_from(self, index: int) -> None:
        # caller holds the lock; only uncommitted entries may conflict
        if index <= self.commit_index:
            raise RuntimeError(f"{self.node_id}: asked to truncate committed entry {index}")
        dropped = self.log[index:]
        self.log = self.log[:index]
        self.log_terms = self.log_terms[:index]
        self.store.truncate_entries(self.log, self.log_terms)
        self._log_tx_hashes = {tx.tx_hash for b in self.log for tx in b.transactions}
        self._spec_state = None
        for block in dropped:
            for tx in block.transactions:
                if tx.tx_hash not in self._log_tx_hashes and tx.tx_hash not in self._pool_hashes:
                    self._pool.append(tx)
                    self._pool_hashes.add(tx.tx_hash)
        if self._pool and self._pool_since is None:
            self._pool_since = time.monotonic()

    def _drop_from_pool(self, transactions) -> None:
        hashes = {tx.tx_hash for tx in transactions} & self._pool_hashes
        if not hashes:
            return
        self._pool = [tx for tx in self._pool if tx.tx_hash not in hashes]
        self._pool_hashes -= hashes
        self._pool_since = time.monotonic() if self._pool else None

    # -- leader: batching and sealing -----------------------------------------

    def _seal_ready_locked(self) -> bool:
        if self.role != ROLE_LEADER or not self._pool:
            return False
        if len(self.log) - 1 == self.commit_index:
            return True  # nothing in flight: seal immediately
        if len(self._pool) >= self.config.batch_max_txs:
            return True
        age = time.monotonic() - (self._pool_since or time.monotonic())
        return age >= self.config.batch_wait_ms / 1000.0

    def _seal_loop(self) -> None:
        while self._running:
            with self._lock:
                if not self._seal_ready_locked():
                    self._seal_cv.wait(timeout=_TICK_S)
                    continue
                if not self._seal_block():
                    # pool holds only txs waiting on a nonce gap: back off
                    self._seal_cv.wait(timeout=_TICK_S)

    def _seal_block(self) -> bool:
        # caller holds the lock; True when the pool shrank or a block sealed
        if self._spec_state is None:
            self._rebuild_spec_state()
        chosen: list[Transaction] = []
        taken_nonces: dict[str, int] = {}
        leftover: list[Transaction] = []
        evicted = False
        spec_nonces = self._spec_state["nonces"]
        for tx in self._pool:
            if len(chosen) >= self.config.batch_max_txs:
                leftover.append(tx)
                continue
            if tx.tx_hash in self._log_tx_hashes:
                evicted = True  # already proposed or committed
                continue
            floor = spec_nonces.get(tx.sender, 0)
            if tx.nonce <= floor:
                evicted = True  # nonce consumed by a different tx; can never execute
                continue
            expected = taken_nonces.get(tx.sender, floor) + 1
            if tx.nonce == expected:
                chosen.append(tx)
                taken_nonces[tx.sender] = tx.nonce
            else:
                leftover.append(tx)
        self._pool = leftover
        self._pool_hashes = {tx.tx_hash for tx in leftover}
        self._pool_since = time.monotonic() if leftover else None
        if not chosen:
            return evicted
        next_state = copy.deepcopy(self._spec_state)
        apply_transactions(next_state, chosen, self.executor)
        block = make_block(
            index=len(self.log),
            parent_hash=self.log[-1].block_hash,
            transactions=chosen,
            state_root=digest(next_state),
            timestamp=int(self.clock()),
        )
        self.store.append_entry(block, self.current_term)
        self.log.append(block)
        self.log_terms.append(self.current_term)
        self._log_tx_hashes.update(tx.tx_hash for tx in chosen)
        self._spec_state = next_state
        for event in self._repl_events.values():
            event.set()
        if not self._peers:
            self._advance_commit()
        return True

    def _rebuild_spec_state(self) -> None:
        # caller holds the lock
        spec = copy.deepcopy(self.state)
        for block in self.log[self.commit_index + 1 :]:
            apply_transactions(spec, block.transactions, self.executor)
        self._spec_state = spec
