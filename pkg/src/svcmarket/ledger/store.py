"""Durable block log and chain verification.

On-disk layout inside a node's data directory:

- ``blocks.log``: one canonical-JSON block per line, append-only. Holds
  every log entry the node has accepted (the consensus protocol may
  truncate an uncommitted suffix after a leader change).
- ``terms.log``: one integer per line, the consensus term of the block
  on the same line of blocks.log.
- ``raft.json``: {current_term, voted_for, commit_index}, rewritten
  atomically.

Entries are flushed and fsynced before they are acknowledged to the
rest of the cluster, so a crash can lose at most an unacknowledged
tail; recovery tolerates torn trailing lines.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

from ..canonical import ZERO_DIGEST, canonical_json
from ..errors import OperationError
from .types import Block, check_block

BLOCKS_FILE = "blocks.log"
TERMS_FILE = "terms.log"
RAFT_FILE = "raft.json"


@dataclass
class VerificationReport:
    valid: bool
    first_bad_index: int | None = None
    checked: int = 0
    reason: str | None = None

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "first_bad_index": self.first_bad_index,
            "checked": self.checked,
            "reason": self.reason,
        }


class BlockStore:
    """Append-only block log with crash-tolerant recovery."""

    def __init__(self, data_dir: str | Path):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._blocks_path = self.data_dir / BLOCKS_FILE
        self._terms_path = self.data_dir / TERMS_FILE
        self._raft_path = self.data_dir / RAFT_FILE
        self._blocks_fh = None
        self._terms_fh = None

    # -- entry log -------------------------------------------------------

    def load_entries(self) -> tuple[list[Block], list[int]]:
        """Read back (blocks, terms), dropping any torn or invalid tail."""
        blocks: list[Block] = []
        if self._blocks_path.exists():
            raw = self._blocks_path.read_bytes()
            for line in raw.split(b"\n"):
                if not line:
                    continue
                try:
                    value = json.loads(line)
                    block = Block.from_dict(value)
                    parent = blocks[-1].block_hash if blocks else ZERO_DIGEST
                    if block.index != len(blocks):
                        raise ValueError("index gap")
                    check_block(block, parent)
                except (ValueError, OperationError):
                    break
                blocks.append(block)
        terms: list[int] = []
        if self._terms_path.exists():
            for line in self._terms_path.read_bytes().split(b"\n"):
                if not line:
                    continue
                try:
                    terms.append(int(line))
                except ValueError:
                    break
        n = min(len(blocks), len(terms))
        blocks, terms = blocks[:n], terms[:n]
        self._rewrite(blocks, terms)
        return blocks, terms

    def append_entry(self, block: Block, term: int) -> None:
        if self._blocks_fh is None:
            self._open_append()
        self._blocks_fh.write(canonical_json(block.to_dict()) + b"\n")
        self._blocks_fh.flush()
        os.fsync(self._blocks_fh.fileno())
        self._terms_fh.write(f"{term}\n".encode())
        self._terms_fh.flush()
        os.fsync(self._terms_fh.fileno())

    def truncate_entries(self, blocks: list[Block], terms: list[int]) -> None:
        """Rewrite the on-disk log to exactly the given prefix."""
        self._rewrite(blocks, terms)

    def _rewrite(self, blocks: list[Block], terms: list[int]) -> None:
        self._close()
        tmp_b = self._blocks_path.with_suffix(".tmp")
        with open(tmp_b, "wb") as fh:
            for block in blocks:
                fh.write(canonical_json(block.to_dict()) + b"\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_b, self._blocks_path)
        tmp_t = self._terms_path.with_suffix(".tmp")
        with open(tmp_t, "wb") as fh:
            for term in terms:
                fh.write(f"{term}\n".encode())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_t, self._terms_path)

    def _open_append(self) -> None:
        self._blocks_fh = open(self._blocks_path, "ab")
        self._terms_fh = open(self._terms_path, "ab")

    def _close(self) -> None:
        if self._blocks_fh is not None:
            self._blocks_fh.close()
            self._terms_fh.close()
            self._blocks_fh = None
            self._terms_fh = None

    def close(self) -> None:
        self._close()

    # -- consensus metadata ------------------------------------------------

    def load_raft_state(self) -> dict:
        if not self._raft_path.exists():
            return {"current_term": 0, "voted_for": None, "commit_index": -1}
        try:
            state = json.loads(self._raft_path.read_text())
            return {
                "current_term": int(state["current_term"]),
                "voted_for": state["voted_for"],
                "commit_index": int(state["commit_index"]),
            }
        except (ValueError, KeyError, TypeError):
            return {"current_term": 0, "voted_for": None, "commit_index": -1}

    def save_raft_state(self, current_term: int, voted_for: str | None, commit_index: int) -> None:
        tmp = self._raft_path.with_suffix(".tmp")
        payload = {
            "current_term": current_term,
            "voted_for": voted_for,
            "commit_index": commit_index,
        }
        with open(tmp, "wb") as fh:
            fh.write(canonical_json(payload))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self._raft_path)

    def read_raw_lines(self) -> list[bytes]:
        self._blocks_fh and self._blocks_fh.flush()
        if not self._blocks_path.exists():
            return []
        raw = self._blocks_path.read_bytes()
        if raw.endswith(b"\n"):
            raw = raw[:-1]
        return raw.split(b"\n") if raw else []


def _verify_line(line: bytes, expected_index: int, parent_hash: str | None) -> Block:
    """Parse and fully re-verify one stored block line.

    Raises ValueError on any discrepancy: parse failure, non-canonical
    bytes, index mismatch, bad tx hash or signature, bad block hash, or
    broken parent link (when parent_hash is known).
    """
    try:
        value = json.loads(line)
    except ValueError as exc:
        raise ValueError(f"unparseable block line: {exc}") from exc
    if canonical_json(value) != line:
        raise ValueError("stored line is not in canonical form")
    block = Block.from_dict(value)
    if block.index != expected_index:
        raise ValueError(f"stored index {block.index} != position {expected_index}")
    if parent_hash is None:
        parent_hash = block.parent_hash  # outside range; self-consistency only
    if expected_index == 0:
        parent_hash = ZERO_DIGEST
    try:
        check_block(block, parent_hash)
    except OperationError as exc:
        raise ValueError(str(exc)) from exc
    return block


def verify_chain_lines(
    lines: list[bytes], from_index: int, to_index: int
) -> VerificationReport:
    """Re-verify stored blocks [from_index, to_index] from raw file lines.

    Works purely from the on-disk representation so that any byte-level
    mutation, not just semantic changes, is detected.
    """
    parent_hash: str | None = None
    if from_index > 0 and from_index - 1 < len(lines):
        try:
            prev = json.loads(lines[from_index - 1])
            parent_hash = prev["block_hash"] if isinstance(prev, dict) else None
            if not isinstance(parent_hash, str):
                parent_hash = None
        except ValueError:
            parent_hash = None
    checked = 0
    for index in range(from_index, to_index + 1):
        if index >= len(lines):
            return VerificationReport(
                valid=False, first_bad_index=index, checked=checked, reason="missing block line"
            )
        try:
            block = _verify_line(lines[index], index, parent_hash)
        except ValueError as exc:
            return VerificationReport(
                valid=False, first_bad_index=index, checked=checked, reason=str(exc)
            )
        parent_hash = block.block_hash
        checked += 1
    return VerificationReport(valid=True, checked=checked)


def replay_state_roots(initial_state: dict, apply_block, blocks: list[Block]) -> list[str]:
    """Recompute the state root at every height by replaying from genesis.

    ``apply_block(state, block) -> state_root`` must be the same function
    the nodes use; determinism means the returned roots match the stored
    ones exactly.
    """
    state = initial_state
    roots = []
    for block in blocks:
        roots.append(apply_block(state, block))
    return roots
