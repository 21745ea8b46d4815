"""Shared operation errors with machine-readable codes."""

from __future__ import annotations


class OperationError(Exception):
    """An operation failure the caller can act on, identified by a stable code."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code
        self.message = message or code

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message}

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"OperationError({self.code!r}, {self.message!r})"


# Request shape
MALFORMED_REQUEST = "MALFORMED_REQUEST"

# Account / registry
ALREADY_EXISTS = "ALREADY_EXISTS"
NOT_FOUND = "NOT_FOUND"
MALFORMED_KEY = "MALFORMED_KEY"
MALFORMED_CONTACT = "MALFORMED_CONTACT"

# Tokens and authentication
INVALID_SIGNATURE = "INVALID_SIGNATURE"
MALFORMED_TOKEN = "MALFORMED_TOKEN"
TOKEN_EXPIRED = "TOKEN_EXPIRED"
ROLE_MISMATCH = "ROLE_MISMATCH"
SKEWED_TIMESTAMP = "SKEWED_TIMESTAMP"

# Resource descriptions and quotas
MALFORMED_RESOURCE = "MALFORMED_RESOURCE"
QUOTA_EXCEEDED = "QUOTA_EXCEEDED"
OVERFLOW = "OVERFLOW"

# Grants and delegations
GRANT_EXPIRED = "GRANT_EXPIRED"
DURATION_EXCEEDED = "DURATION_EXCEEDED"
DUPLICATE_SUBSCRIPTION = "DUPLICATE_SUBSCRIPTION"
CALLBACK_REJECTED = "CALLBACK_REJECTED"
CALLBACK_TIMEOUT = "CALLBACK_TIMEOUT"
BROKEN_CHAIN = "BROKEN_CHAIN"
UNAUTHORIZED_SENDER = "UNAUTHORIZED_SENDER"

# Ledger
STALE_NONCE = "STALE_NONCE"
NO_LEADER = "NO_LEADER"
LOST_LEADERSHIP = "LOST_LEADERSHIP"
OUT_OF_RANGE = "OUT_OF_RANGE"

# Usage and billing
CHARGE_MISMATCH = "CHARGE_MISMATCH"
ALREADY_PAID = "ALREADY_PAID"
INSUFFICIENT_FUNDS = "INSUFFICIENT_FUNDS"
