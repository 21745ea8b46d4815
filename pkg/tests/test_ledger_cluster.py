"""Replication, leader failover, and deterministic re-execution."""

import threading
import time

import pytest

from svcmarket.canonical import digest
from svcmarket.errors import NO_LEADER, STALE_NONCE, OperationError
from svcmarket.keys import KeyPair
from svcmarket.ledger.node import apply_block
from svcmarket.ledger.store import replay_state_roots
from svcmarket.ledger.types import Block, make_transaction

from helpers import (
    TEST_GENESIS,
    KvExecutor,
    build_cluster,
    converged,
    leader_of,
    restart_node,
    start_cluster,
    stop_all,
    wait_until,
)

T0 = 1_700_000_000


def set_tx(keypair, nonce, key=None, value=None, method="set"):
    payload = {
        "contract": "kv",
        "method": method,
        "args": {"key": key or f"{keypair.account_id[:8]}/{nonce}", "value": value or nonce},
    }
    return make_transaction(keypair, payload, nonce, T0 + nonce)


@pytest.fixture
def cluster(tmp_path):
    nodes = start_cluster(build_cluster(tmp_path, n=3))
    yield nodes
    stop_all(nodes)


def committed_tx_hashes(node) -> list[str]:
    order = []
    for i in range(node.status()["commit_index"] + 1):
        order.extend(tx["tx_hash"] for tx in node.get_block(i)["transactions"])
    return order


def test_exactly_one_leader_and_agreement(cluster):
    leader = leader_of(cluster)
    wait_until(
        lambda: [n.status()["leader_id"] for n in cluster] == [leader.node_id] * 3,
        message="all nodes agree on the leader",
    )
    assert sum(1 for n in cluster if n.status()["role"] == "leader") == 1


def test_commit_replicates_everywhere(cluster):
    leader = leader_of(cluster)
    sender = KeyPair.generate()
    receipt = leader.submit_and_wait(set_tx(sender, 1, key="greeting", value="hi"))
    assert receipt["status"] == "committed"
    assert receipt["ok"]

    wait_until(lambda: converged(cluster), message="replication to all nodes")
    for node in cluster:
        assert node.with_state(lambda s: s["kv"]["greeting"]) == "hi"


def test_follower_forwards_submissions(cluster):
    leader = leader_of(cluster)
    follower = next(n for n in cluster if n.node_id != leader.node_id)
    sender = KeyPair.generate()
    receipt = follower.submit_and_wait(set_tx(sender, 1), timeout_s=10)
    assert receipt["status"] == "committed"


def test_concurrent_clients_commit_exactly_once_in_one_order(cluster):
    leader = leader_of(cluster)
    senders = [KeyPair.generate() for _ in range(5)]
    per_sender = 20
    failures = []

    def client(keypair):
        try:
            for nonce in range(1, per_sender + 1):
                receipt = leader.submit_and_wait(set_tx(keypair, nonce), timeout_s=30)
                assert receipt["ok"], receipt
        except Exception as exc:  # surfaced after join
            failures.append(exc)

    threads = [threading.Thread(target=client, args=(kp,)) for kp in senders]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not failures

    wait_until(lambda: converged(cluster), timeout_s=15, message="cluster convergence")
    orders = [committed_tx_hashes(node) for node in cluster]
    assert orders[0] == orders[1] == orders[2]
    assert len(orders[0]) == len(set(orders[0])) == 5 * per_sender

    # per-sender nonces appear strictly in sequence with no gaps
    for node in cluster:
        nonces = node.with_state(lambda s: dict(s["nonces"]))
        assert nonces == {kp.account_id: per_sender for kp in senders}


def test_business_failure_consumes_nonce(cluster):
    leader = leader_of(cluster)
    sender = KeyPair.generate()
    receipt = leader.submit_and_wait(set_tx(sender, 1, method="bogus"))
    assert receipt["status"] == "committed"
    assert not receipt["ok"]
    assert receipt["error"]["code"] == "NOT_FOUND"

    follow_up = leader.submit_and_wait(set_tx(sender, 2))
    assert follow_up["ok"]


def test_nonce_rules(cluster):
    leader = leader_of(cluster)
    sender = KeyPair.generate()
    tx = set_tx(sender, 1)
    assert leader.submit_and_wait(tx)["ok"]

    # resubmitting the same transaction returns the committed receipt
    again = leader.submit_transaction(tx)
    assert again["status"] == "committed"
    assert again["block_index"] == leader.get_receipt(tx.tx_hash)["block_index"]

    # a fresh transaction reusing the nonce is refused outright
    with pytest.raises(OperationError) as exc:
        leader.submit_transaction(set_tx(sender, 1, key="other"))
    assert exc.value.code == STALE_NONCE

    # a nonce gap waits in the pool; filling the gap releases it in order
    tx5 = set_tx(sender, 5)
    assert leader.submit_transaction(tx5)["status"] == "pending"
    time.sleep(0.4)
    assert leader.get_receipt(tx5.tx_hash)["status"] == "pending"
    for nonce in (2, 3, 4):
        assert leader.submit_and_wait(set_tx(sender, nonce))["ok"]
    assert leader.submit_and_wait(tx5, timeout_s=10)["ok"]

    mine = [
        tx["nonce"]
        for i in range(leader.status()["commit_index"] + 1)
        for tx in leader.get_block(i)["transactions"]
        if tx["sender"] == sender.account_id
    ]
    assert mine == [1, 2, 3, 4, 5]


def test_leader_kill_and_restart_preserves_history(cluster, tmp_path):
    leader = leader_of(cluster)
    sender = KeyPair.generate()
    for nonce in range(1, 11):
        assert leader.submit_and_wait(set_tx(sender, nonce))["ok"]
    wait_until(lambda: converged(cluster), message="pre-crash convergence")
    before = committed_tx_hashes(cluster[0])
    old_commit = cluster[0].status()["commit_index"]
    old_hash = cluster[0].get_block(old_commit)["block_hash"]

    leader.kill()
    survivors = [n for n in cluster if n is not leader]
    new_leader = leader_of(survivors)
    assert new_leader.node_id != leader.node_id

    for nonce in range(11, 21):
        assert new_leader.submit_and_wait(set_tx(sender, nonce), timeout_s=15)["ok"]

    revived = restart_node(leader)
    try:
        full = survivors + [revived]
        wait_until(lambda: converged(full), timeout_s=20, message="rejoin convergence")
        after = committed_tx_hashes(revived)
        assert after[: len(before)] == before
        assert len(after) == len(set(after)) == 20
        assert revived.get_block(old_commit)["block_hash"] == old_hash
    finally:
        revived.stop()


def test_no_commits_without_majority(cluster):
    leader = leader_of(cluster)
    followers = [n for n in cluster if n is not leader]
    sender = KeyPair.generate()
    assert leader.submit_and_wait(set_tx(sender, 1))["ok"]

    for follower in followers:
        follower.kill()
    time.sleep(0.5)  # let in-flight acks from the dying followers land
    frozen = leader.status()["commit_index"]
    last = leader.with_state(lambda s: s["nonces"].get(sender.account_id, 0))

    receipt = leader.submit_transaction(set_tx(sender, last + 1))
    assert receipt["status"] == "pending"
    with pytest.raises(OperationError) as exc:
        leader.submit_and_wait(set_tx(sender, last + 2), timeout_s=1.5)
    assert exc.value.code == NO_LEADER
    assert leader.status()["commit_index"] == frozen

    # majority restored: the pooled transactions finally commit
    revived = restart_node(followers[0])
    try:
        wait_until(
            lambda: leader.status()["commit_index"] > frozen,
            timeout_s=15,
            message="commit after majority restored",
        )
    finally:
        revived.stop()


def test_replay_reproduces_every_state_root(cluster):
    leader = leader_of(cluster)
    senders = [KeyPair.generate() for _ in range(3)]
    for nonce in range(1, 11):
        for kp in senders:
            leader.submit_and_wait(set_tx(kp, nonce))

    commit = leader.status()["commit_index"]
    blocks = [Block.from_dict(leader.get_block(i)) for i in range(commit + 1)]
    stored_roots = [b.state_root for b in blocks]

    executor = KvExecutor()
    state = executor.init_state(TEST_GENESIS)
    replayed = replay_state_roots(
        state, lambda s, b: apply_block(s, b, executor)[0], blocks
    )
    assert replayed == stored_roots
    assert blocks[0].state_root == digest(executor.init_state(TEST_GENESIS))


def test_node_level_chain_verification(cluster):
    leader = leader_of(cluster)
    sender = KeyPair.generate()
    for nonce in range(1, 6):
        leader.submit_and_wait(set_tx(sender, nonce))
    commit = leader.status()["commit_index"]
    report = leader.verify_chain(0, commit)
    assert report.valid
    assert report.checked == commit + 1
    with pytest.raises(OperationError):
        leader.verify_chain(0, commit + 1)
