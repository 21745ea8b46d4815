"""Transactions and blocks.

Hash definitions (SHA-256 throughout, hex-encoded digests):

- signing payload: canonical JSON of {sender, nonce, payload, timestamp}
- tx_hash: digest of the canonical JSON of the full transaction
  (signature included)
- tx_root: digest of the concatenated raw tx_hash bytes, in block order
- block_hash: digest of
  str(index) + raw(parent_hash) + raw(tx_root) + raw(state_root) + str(timestamp)

where raw() decodes a hex digest to its 32 bytes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from ..canonical import ZERO_DIGEST, canonical_json, sha256_hex
from ..errors import INVALID_SIGNATURE, OperationError
from ..keys import KeyPair, verify_signature

_HEX64 = frozenset("0123456789abcdef")


def _is_digest(value) -> bool:
    return isinstance(value, str) and len(value) == 64 and set(value) <= _HEX64


@dataclass(frozen=True)
class Transaction:
    sender: str
    nonce: int
    payload: dict  # {"contract": str, "method": str, "args": {...}}
    timestamp: int
    signature: str
    tx_hash: str

    def to_dict(self) -> dict:
        return {
            "sender": self.sender,
            "nonce": self.nonce,
            "payload": self.payload,
            "timestamp": self.timestamp,
            "signature": self.signature,
            "tx_hash": self.tx_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Transaction":
        if not isinstance(d, dict) or set(d) != {
            "sender",
            "nonce",
            "payload",
            "timestamp",
            "signature",
            "tx_hash",
        }:
            raise ValueError("transaction must have exactly the six defined fields")
        if not isinstance(d["sender"], str):
            raise ValueError("sender must be a string")
        if not isinstance(d["nonce"], int) or isinstance(d["nonce"], bool) or d["nonce"] < 1:
            raise ValueError("nonce must be a positive integer")
        payload = d["payload"]
        if (
            not isinstance(payload, dict)
            or set(payload) != {"contract", "method", "args"}
            or not isinstance(payload["contract"], str)
            or not isinstance(payload["method"], str)
            or not isinstance(payload["args"], dict)
        ):
            raise ValueError("payload must be {contract, method, args}")
        if not isinstance(d["timestamp"], int) or isinstance(d["timestamp"], bool):
            raise ValueError("timestamp must be an integer")
        if not (isinstance(d["signature"], str) and len(d["signature"]) == 128):
            raise ValueError("signature must be 64 bytes hex")
        if not _is_digest(d["tx_hash"]):
            raise ValueError("tx_hash must be a 32-byte hex digest")
        return cls(
            sender=d["sender"],
            nonce=d["nonce"],
            payload=payload,
            timestamp=d["timestamp"],
            signature=d["signature"],
            tx_hash=d["tx_hash"],
        )


def signing_bytes(sender: str, nonce: int, payload: dict, timestamp: int) -> bytes:
    return canonical_json(
        {"sender": sender, "nonce": nonce, "payload": payload, "timestamp": timestamp}
    )


def transaction_hash(
    sender: str, nonce: int, payload: dict, timestamp: int, signature: str
) -> str:
    return sha256_hex(
        canonical_json(
            {
                "sender": sender,
                "nonce": nonce,
                "payload": payload,
                "timestamp": timestamp,
                "signature": signature,
            }
        )
    )


def make_transaction(
    keypair: KeyPair, payload: dict, nonce: int, timestamp: int
) -> Transaction:
    sender = keypair.account_id
    signature = keypair.sign(signing_bytes(sender, nonce, payload, timestamp))
    return Transaction(
        sender=sender,
        nonce=nonce,
        payload=payload,
        timestamp=timestamp,
        signature=signature,
        tx_hash=transaction_hash(sender, nonce, payload, timestamp, signature),
    )


def check_transaction(tx: Transaction) -> None:
    """Raise INVALID_SIGNATURE unless hash and signature both verify."""
    expected = transaction_hash(tx.sender, tx.nonce, tx.payload, tx.timestamp, tx.signature)
    if tx.tx_hash != expected:
        raise OperationError(INVALID_SIGNATURE, "tx_hash does not match content")
    data = signing_bytes(tx.sender, tx.nonce, tx.payload, tx.timestamp)
    if not verify_signature(tx.sender, data, tx.signature):
        raise OperationError(INVALID_SIGNATURE, "signature does not verify under sender")


def transactions_root(tx_hashes: list[str]) -> str:
    h = hashlib.sha256()
    for tx_hash in tx_hashes:
        h.update(bytes.fromhex(tx_hash))
    return h.hexdigest()


def block_hash_of(
    index: int, parent_hash: str, tx_root: str, state_root: str, timestamp: int
) -> str:
    h = hashlib.sha256()
    h.update(str(index).encode())
    h.update(bytes.fromhex(parent_hash))
    h.update(bytes.fromhex(tx_root))
    h.update(bytes.fromhex(state_root))
    h.update(str(timestamp).encode())
    return h.hexdigest()


@dataclass(frozen=True)
class Block:
    index: int
    parent_hash: str
    timestamp: int
    transactions: tuple[Transaction, ...]
    state_root: str
    block_hash: str

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "parent_hash": self.parent_hash,
            "timestamp": self.timestamp,
            "transactions": [tx.to_dict() for tx in self.transactions],
            "state_root": self.state_root,
            "block_hash": self.block_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Block":
        if not isinstance(d, dict) or set(d) != {
            "index",
            "parent_hash",
            "timestamp",
            "transactions",
            "state_root",
            "block_hash",
        }:
            raise ValueError("block must have exactly the six defined fields")
        if not isinstance(d["index"], int) or isinstance(d["index"], bool) or d["index"] < 0:
            raise ValueError("index must be a non-negative integer")
        if not isinstance(d["timestamp"], int) or isinstance(d["timestamp"], bool):
            raise ValueError("timestamp must be an integer")
        for key in ("parent_hash", "state_root", "block_hash"):
            if not _is_digest(d[key]):
                raise ValueError(f"{key} must be a 32-byte hex digest")
        if not isinstance(d["transactions"], list):
            raise ValueError("transactions must be an array")
        txs = tuple(Transaction.from_dict(t) for t in d["transactions"])
        return cls(
            index=d["index"],
            parent_hash=d["parent_hash"],
            timestamp=d["timestamp"],
            transactions=txs,
            state_root=d["state_root"],
            block_hash=d["block_hash"],
        )


def make_block(
    index: int,
    parent_hash: str,
    transactions: list[Transaction],
    state_root: str,
    timestamp: int,
) -> Block:
    tx_root = transactions_root([tx.tx_hash for tx in transactions])
    return Block(
        index=index,
        parent_hash=parent_hash,
        timestamp=timestamp,
        transactions=tuple(transactions),
        state_root=state_root,
        block_hash=block_hash_of(index, parent_hash, tx_root, state_root, timestamp),
    )


def check_block(block: Block, parent_hash: str, verify_signatures: bool = True) -> None:
    """Raise ValueError unless hashes, signatures, and the parent link hold.

    verify_signatures=False skips the per-transaction ECDSA checks; hashes
    and links are always recomputed. Replication uses the cheap form since
    every transaction is re-verified at execution anyway.
    """
    if block.parent_hash != parent_hash:
        raise ValueError("parent_hash does not match previous block")
    for tx in block.transactions:
        expected = transaction_hash(tx.sender, tx.nonce, tx.payload, tx.timestamp, tx.signature)
        if tx.tx_hash != expected:
            raise ValueError(f"tx_hash mismatch for {tx.tx_hash[:12]}")
        if verify_signatures:
            check_transaction(tx)
    tx_root = transactions_root([tx.tx_hash for tx in block.transactions])
    expected = block_hash_of(
        block.index, block.parent_hash, tx_root, block.state_root, block.timestamp
    )
    if block.block_hash != expected:
        raise ValueError("block_hash does not match content")


def genesis_parent_hash() -> str:
    return ZERO_DIGEST
