"""Replicated, append-only, tamper-evident ledger.

Transactions are globally ordered by a leader-based consensus protocol,
then executed deterministically on every node (order-execute). Blocks
are hash-chained; any mutation of committed data is detectable.
"""

from .node import LedgerNode, NodeConfig, PeerConfig
from .store import BlockStore, VerificationReport, replay_state_roots, verify_chain_lines
from .types import Block, Transaction, make_transaction

__all__ = [
    "Block",
    "BlockStore",
    "LedgerNode",
    "NodeConfig",
    "PeerConfig",
    "Transaction",
    "VerificationReport",
    "make_transaction",
    "replay_state_roots",
    "verify_chain_lines",
]
