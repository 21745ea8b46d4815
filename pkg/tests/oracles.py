"""Independent reference computations the tests compare the package against.

Everything here is deliberately written from the documented semantics,
not from the package internals: different arithmetic formulations, plain
dict/loop implementations, and direct hashlib use. A bug in the package
should disagree with these, not co-vary with them.
"""

from __future__ import annotations

import hashlib
import json


# -- quota semantics ----------------------------------------------------------
#
# Renewable quotas reset exactly at created + k * interval; nonrenewable
# quotas never reset. Each application is all-or-nothing. The oracle uses
# absolute period indexes (k = (t - created) // interval) rather than a
# rolling period_start, so the two implementations share no code path.


def quota_schedule_outcomes(kind, quota, interval, created, events):
    """events: [(at, units)] in time order -> [(accepted, units_used_after)]."""
    used = 0
    period = 0
    out = []
    for at, units in events:
        if kind == "renewable":
            k = (at - created) // interval if at >= created else 0
            if k > period:
                period = k
                used = 0
        if units >= 0 and used + units <= quota:
            used += units
            out.append((True, used))
        else:
            out.append((False, used))
    return out


# -- billing -----------------------------------------------------------------


def brute_force_bill_total(elements, rates, period_start, period_end):
    """Recompute one bill's line items and total from raw usage elements.

    elements: [(metric, unitsUsed, end_timestamp)]; attribution is by end
    timestamp, half-open [period_start, period_end). Returns (line items
    keyed by metric, total).
    """
    per_metric: dict[str, int] = {}
    for metric, units, end in elements:
        if period_start <= end < period_end:
            per_metric[metric] = per_metric.get(metric, 0) + units
    lines = {}
    total = 0
    for metric in sorted(per_metric):
        charge = per_metric[metric] * rates[metric]
        lines[metric] = {"unitsUsed": per_metric[metric], "charge": charge}
        total += charge
    return lines, total


# -- hashing ------------------------------------------------------------------
#
# Recompute the chain hashes straight from the documented formulas with
# hashlib, taking no shortcuts through the package's helpers.


def reference_canonical(value) -> bytes:
    return json.dumps(
        value, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def reference_tx_hash(tx: dict) -> str:
    return hashlib.sha256(reference_canonical(tx)).hexdigest()


def reference_block_hash(block: dict) -> str:
    tx_root = hashlib.sha256()
    for tx in block["transactions"]:
        tx_root.update(bytes.fromhex(tx["tx_hash"]))
    h = hashlib.sha256()
    h.update(str(block["index"]).encode())
    h.update(bytes.fromhex(block["parent_hash"]))
    h.update(tx_root.digest())
    h.update(bytes.fromhex(block["state_root"]))
    h.update(str(block["timestamp"]).encode())
    return h.hexdigest()


def reference_verify_chain(block_dicts) -> tuple[bool, int | None]:
    """(valid, first bad index) for a list of parsed block documents."""
    parent = "0" * 64
    for i, block in enumerate(block_dicts):
        if block["index"] != i or block["parent_hash"] != parent:
            return False, i
        for tx in block["transactions"]:
            content = {
                "sender": tx["sender"],
                "nonce": tx["nonce"],
                "payload": tx["payload"],
                "timestamp": tx["timestamp"],
                "signature": tx["signature"],
            }
            if hashlib.sha256(reference_canonical(content)).hexdigest() != tx["tx_hash"]:
                return False, i
        if reference_block_hash(block) != block["block_hash"]:
            return False, i
        parent = block["block_hash"]
    return True, None
