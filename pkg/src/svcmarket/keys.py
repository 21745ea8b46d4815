"""ECDSA key management.

Accounts are identified by hex-encoded compressed secp256k1 public keys
(33 bytes, 66 hex chars). Signatures are SHA-256 ECDSA in raw 64-byte
``r || s`` form, hex-encoded on the wire. The curve choice is isolated
here so it can be swapped without touching callers.
"""

from __future__ import annotations

import json
import os
import secrets
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import MALFORMED_KEY, OperationError

_CURVE = ec.SECP256K1()
_ORDER = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141
_SIGALG = ec.ECDSA(hashes.SHA256())


class KeyPair:
    """A signing identity: secp256k1 scalar plus its compressed public point."""

    def __init__(self, private_key: ec.EllipticCurvePrivateKey):
        self._private = private_key
        self.account_id = public_key_hex(private_key.public_key())

    @classmethod
    def generate(cls) -> "KeyPair":
        return cls(ec.generate_private_key(_CURVE))

    @classmethod
    def from_private_hex(cls, private_hex: str) -> "KeyPair":
        scalar = int(private_hex, 16)
        if not 0 < scalar < _ORDER:
            raise OperationError(MALFORMED_KEY, "private scalar out of range")
        return cls(ec.derive_private_key(scalar, _CURVE))

    @property
    def private_hex(self) -> str:
        return format(self._private.private_numbers().private_value, "064x")

    def sign(self, data: bytes) -> str:
        """Sign ``data``, returning the raw 64-byte signature hex-encoded."""
        der = self._private.sign(data, _SIGALG)
        r, s = decode_dss_signature(der)
        return format(r, "064x") + format(s, "064x")

    def save(self, path: str | Path) -> None:
        payload = {"private_key": self.private_hex, "public_key": self.account_id}
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        fd = os.open(p, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "KeyPair":
        with open(path) as fh:
            payload = json.load(fh)
        return cls.from_private_hex(payload["private_key"])

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"KeyPair({self.account_id[:12]}…)"


def public_key_hex(public_key: ec.EllipticCurvePublicKey) -> str:
    return public_key.public_bytes(Encoding.X962, PublicFormat.CompressedPoint).hex()


def parse_public_key(account_id: str) -> ec.EllipticCurvePublicKey:
    """Decode a hex compressed point; raises MALFORMED_KEY if invalid."""
    try:
        raw = bytes.fromhex(account_id)
        if len(raw) != 33:
            raise ValueError("expected 33-byte compressed point")
        return ec.EllipticCurvePublicKey.from_encoded_point(_CURVE, raw)
    except (ValueError, TypeError) as exc:
        raise OperationError(MALFORMED_KEY, f"invalid public key: {exc}") from exc


def is_valid_public_key(account_id: str) -> bool:
    try:
        parse_public_key(account_id)
        return True
    except OperationError:
        return False


def verify_signature(account_id: str, data: bytes, signature_hex: str) -> bool:
    """Check a raw r||s signature against a compressed-hex public key."""
    try:
        raw = bytes.fromhex(signature_hex)
    except ValueError:
        return False
    if len(raw) != 64:
        return False
    r = int.from_bytes(raw[:32], "big")
    s = int.from_bytes(raw[32:], "big")
    try:
        public = parse_public_key(account_id)
        public.verify(encode_dss_signature(r, s), data, _SIGALG)
        return True
    except (OperationError, InvalidSignature, ValueError):
        return False


def random_account_id() -> str:
    """A syntactically plausible but unowned account id (test plumbing)."""
    return "02" + secrets.token_hex(32)
