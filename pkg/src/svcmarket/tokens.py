"""Self-validating signed tokens.

Standard three-part web-token wire format: base64url(header JSON) "."
base64url(claims JSON) "." base64url(signature). Signing is ES256K
(secp256k1 + SHA-256, raw r||s signature) so tokens interoperate with
common JWT tooling. Validation is a pure function of the token, the
expected public key, and a caller-supplied clock; no shared state is
consulted.
"""

from __future__ import annotations

import base64
import binascii
import json
from typing import Any

from . import canonical
from .errors import (
    INVALID_SIGNATURE,
    MALFORMED_TOKEN,
    ROLE_MISMATCH,
    SKEWED_TIMESTAMP,
    TOKEN_EXPIRED,
    OperationError,
)
from .keys import KeyPair, verify_signature

TOKEN_ALG = "ES256K"

ROLE_TENANT = "tenant"
ROLE_SERVICE = "service"
ROLES = (ROLE_TENANT, ROLE_SERVICE)


def _b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def _b64url_decode(segment: str) -> bytes:
    pad = "=" * (-len(segment) % 4)
    try:
        return base64.urlsafe_b64decode(segment + pad)
    except (binascii.Error, ValueError) as exc:
        raise OperationError(MALFORMED_TOKEN, f"bad base64url segment: {exc}") from exc


def sign_token(keypair: KeyPair, claims: dict[str, Any]) -> str:
    header = {"alg": TOKEN_ALG, "typ": "JWT"}
    signing_input = (
        _b64url(canonical.canonical_json(header))
        + "."
        + _b64url(canonical.canonical_json(claims))
    )
    sig = bytes.fromhex(keypair.sign(signing_input.encode("ascii")))
    return signing_input + "." + _b64url(sig)


def decode_token(token: str) -> tuple[dict, dict, str, str]:
    """Split a token into (header, claims, signing_input, signature_hex).

    Performs structural checks only; use :func:`verify_token` to check the
    signature.
    """
    if not isinstance(token, str):
        raise OperationError(MALFORMED_TOKEN, "token must be a string")
    parts = token.split(".")
    if len(parts) != 3:
        raise OperationError(MALFORMED_TOKEN, "token must have three segments")
    try:
        header = json.loads(_b64url_decode(parts[0]))
        claims = json.loads(_b64url_decode(parts[1]))
    except (ValueError, UnicodeDecodeError) as exc:
        raise OperationError(MALFORMED_TOKEN, f"undecodable token body: {exc}") from exc
    if not isinstance(header, dict) or not isinstance(claims, dict):
        raise OperationError(MALFORMED_TOKEN, "header and claims must be objects")
    if header.get("alg") != TOKEN_ALG:
        raise OperationError(MALFORMED_TOKEN, f"unsupported alg {header.get('alg')!r}")
    signature = _b64url_decode(parts[2])
    if len(signature) != 64:
        raise OperationError(MALFORMED_TOKEN, "signature must be 64 bytes")
    return header, claims, parts[0] + "." + parts[1], signature.hex()


def verify_token(token: str, public_key_hex: str) -> dict[str, Any]:
    """Return the claims iff the token verifies under ``public_key_hex``."""
    _, claims, signing_input, signature = decode_token(token)
    if not verify_signature(public_key_hex, signing_input.encode("ascii"), signature):
        raise OperationError(INVALID_SIGNATURE, "token signature does not verify")
    return claims


# --- marketplace auth tokens -------------------------------------------------


def issue_auth_token(
    manager: KeyPair, subject: str, role: str, now: int, lifetime_s: int
) -> str:
    claims = {"sub": subject, "role": role, "iat": now, "exp": now + lifetime_s}
    return sign_token(manager, claims)


def validate_auth_token(
    token: str, manager_public_key: str, now: int, required_role: str | None = None
) -> dict[str, Any]:
    """Validate an auth token; expiry is exclusive (fails at exactly exp)."""
    claims = verify_token(token, manager_public_key)
    for field in ("sub", "role", "iat", "exp"):
        if field not in claims:
            raise OperationError(MALFORMED_TOKEN, f"missing claim {field!r}")
    if not isinstance(claims["exp"], int) or not isinstance(claims["iat"], int):
        raise OperationError(MALFORMED_TOKEN, "iat/exp must be integers")
    if now >= claims["exp"]:
        raise OperationError(TOKEN_EXPIRED, "token expired")
    if required_role is not None and claims["role"] != required_role:
        raise OperationError(
            ROLE_MISMATCH, f"required role {required_role}, got {claims['role']}"
        )
    return claims


# --- caller-signed timestamp assertions --------------------------------------


def make_assertion(keypair: KeyPair, role: str, now: int) -> str:
    return sign_token(keypair, {"ts": now, "role": role})


def verify_assertion(
    token: str, public_key_hex: str, role: str, now: int, skew_window_s: int
) -> dict[str, Any]:
    claims = verify_token(token, public_key_hex)
    ts = claims.get("ts")
    if not isinstance(ts, int):
        raise OperationError(MALFORMED_TOKEN, "assertion missing integer ts")
    if claims.get("role") != role:
        raise OperationError(ROLE_MISMATCH, "assertion role does not match")
    if abs(now - ts) > skew_window_s:
        raise OperationError(
            SKEWED_TIMESTAMP, f"assertion timestamp off by {abs(now - ts)}s"
        )
    return claims


# --- signed documents ---------------------------------------------------------


def sign_document(keypair: KeyPair, document: Any, extra: dict | None = None) -> str:
    """Wrap a JSON document in a signed token binding its canonical digest."""
    claims = {"doc": document, "doc_sha256": canonical.digest(document)}
    if extra:
        claims.update(extra)
    return sign_token(keypair, claims)


def verify_document_token(token: str, public_key_hex: str) -> dict[str, Any]:
    """Return the claims (with the embedded document under "doc") iff the
    signature verifies and the embedded digest matches the document."""
    claims = verify_token(token, public_key_hex)
    if "doc" not in claims or "doc_sha256" not in claims:
        raise OperationError(MALFORMED_TOKEN, "not a document token")
    if canonical.digest(claims["doc"]) != claims["doc_sha256"]:
        raise OperationError(INVALID_SIGNATURE, "document digest mismatch")
    return claims
