"""Canonical JSON encoding and digests.

Every hash and signature in the system is computed over this encoding:
UTF-8 JSON with lexicographically sorted keys and no insignificant
whitespace. Floats are rejected so that encodings stay byte-reproducible
across platforms; money and timestamps are integers throughout.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

ZERO_DIGEST = "0" * 64


def _reject_floats(value: Any, path: str = "$") -> None:
    if isinstance(value, float):
        raise ValueError(f"float not allowed in canonical value at {path}")
    if isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str):
                raise ValueError(f"non-string key at {path}")
            _reject_floats(v, f"{path}.{k}")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            _reject_floats(v, f"{path}[{i}]")


def canonical_json(value: Any) -> bytes:
    """Encode a JSON-compatible value into its unique canonical byte form."""
    _reject_floats(value)
    return json.dumps(
        value,
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    ).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest(value: Any) -> str:
    """Hex SHA-256 of the canonical encoding of ``value``."""
    return sha256_hex(canonical_json(value))


def is_canonical(data: bytes) -> bool:
    """True iff ``data`` is exactly the canonical encoding of what it parses to."""
    try:
        value = json.loads(data.decode("utf-8"))
        return canonical_json(value) == data
    except (ValueError, UnicodeDecodeError):
        return False
