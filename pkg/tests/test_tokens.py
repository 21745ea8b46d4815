import base64
import json

import pytest

from svcmarket import tokens
from svcmarket.errors import (
    INVALID_SIGNATURE,
    MALFORMED_TOKEN,
    ROLE_MISMATCH,
    SKEWED_TIMESTAMP,
    TOKEN_EXPIRED,
    OperationError,
)
from svcmarket.keys import KeyPair

NOW = 1_700_000_000


@pytest.fixture(scope="module")
def manager():
    return KeyPair.generate()


@pytest.fixture(scope="module")
def subject():
    return KeyPair.generate()


def b64url_decode(segment: str) -> bytes:
    return base64.urlsafe_b64decode(segment + "=" * (-len(segment) % 4))


def test_wire_format_is_standard_jwt(manager):
    token = tokens.sign_token(manager, {"hello": "world"})
    head, claims, sig = token.split(".")
    assert json.loads(b64url_decode(head)) == {"alg": "ES256K", "typ": "JWT"}
    assert json.loads(b64url_decode(claims)) == {"hello": "world"}
    assert len(b64url_decode(sig)) == 64
    assert "=" not in token


def test_verify_token_roundtrip(manager):
    token = tokens.sign_token(manager, {"sub": "abc", "n": 7})
    assert tokens.verify_token(token, manager.account_id) == {"sub": "abc", "n": 7}


def test_verify_token_wrong_key(manager, subject):
    token = tokens.sign_token(manager, {"sub": "abc"})
    with pytest.raises(OperationError) as err:
        tokens.verify_token(token, subject.account_id)
    assert err.value.code == INVALID_SIGNATURE


@pytest.mark.parametrize(
    "mangled",
    [
        "one.two",
        "a.b.c.d",
        "!!!.???.***",
        "",
        42,
    ],
)
def test_decode_rejects_malformed(mangled):
    with pytest.raises(OperationError) as err:
        tokens.decode_token(mangled)
    assert err.value.code == MALFORMED_TOKEN


def test_auth_token_lifecycle(manager, subject):
    token = tokens.issue_auth_token(manager, subject.account_id, "tenant", NOW, 3600)
    claims = tokens.validate_auth_token(token, manager.account_id, NOW)
    assert claims["sub"] == subject.account_id
    assert claims["role"] == "tenant"
    assert claims["exp"] - claims["iat"] == 3600


def test_expiry_is_exclusive(manager, subject):
    token = tokens.issue_auth_token(manager, subject.account_id, "tenant", NOW, 3600)
    tokens.validate_auth_token(token, manager.account_id, NOW + 3599)
    with pytest.raises(OperationError) as err:
        tokens.validate_auth_token(token, manager.account_id, NOW + 3600)
    assert err.value.code == TOKEN_EXPIRED


def test_role_requirement(manager, subject):
    token = tokens.issue_auth_token(manager, subject.account_id, "tenant", NOW, 3600)
    with pytest.raises(OperationError) as err:
        tokens.validate_auth_token(token, manager.account_id, NOW, required_role="service")
    assert err.value.code == ROLE_MISMATCH


def test_assertion_skew_window(subject):
    token = tokens.make_assertion(subject, "tenant", NOW)
    tokens.verify_assertion(token, subject.account_id, "tenant", NOW + 300, 300)
    with pytest.raises(OperationError) as err:
        tokens.verify_assertion(token, subject.account_id, "tenant", NOW + 301, 300)
    assert err.value.code == SKEWED_TIMESTAMP
    with pytest.raises(OperationError) as err:
        tokens.verify_assertion(token, subject.account_id, "service", NOW, 300)
    assert err.value.code == ROLE_MISMATCH


def test_document_token_binds_digest(subject):
    doc = {"resource": {"name": "thing"}}
    token = tokens.sign_document(subject, doc)
    claims = tokens.verify_document_token(token, subject.account_id)
    assert claims["doc"] == doc

    # re-sign the claims with a tampered doc but the old digest
    _, original, _, _ = tokens.decode_token(token)
    tampered = dict(original)
    tampered["doc"] = {"resource": {"name": "other"}}
    forged = tokens.sign_token(subject, tampered)
    with pytest.raises(OperationError) as err:
        tokens.verify_document_token(forged, subject.account_id)
    assert err.value.code == INVALID_SIGNATURE


def test_document_token_wrong_key(manager, subject):
    token = tokens.sign_document(subject, {"a": 1})
    with pytest.raises(OperationError):
        tokens.verify_document_token(token, manager.account_id)


def test_validation_is_pure(manager, subject):
    # same (token, key, clock) inputs always produce the same result
    token = tokens.issue_auth_token(manager, subject.account_id, "tenant", NOW, 3600)
    first = tokens.validate_auth_token(token, manager.account_id, NOW + 10)
    second = tokens.validate_auth_token(token, manager.account_id, NOW + 10)
    assert first == second


@pytest.mark.slow
def test_bit_flip_sweep_never_validates(manager, subject):
    """Flipping any single bit anywhere in the token must not validate."""
    token = tokens.issue_auth_token(manager, subject.account_id, "tenant", NOW, 3600)
    raw = bytearray(token.encode("ascii"))
    accepted = []
    for pos in range(len(raw)):
        for bit in range(8):
            mutated = bytearray(raw)
            mutated[pos] ^= 1 << bit
            try:
                candidate = mutated.decode("ascii")
            except UnicodeDecodeError:
                continue
            if candidate == token:
                continue
            try:
                claims = tokens.validate_auth_token(candidate, manager.account_id, NOW)
            except OperationError:
                continue
            if claims != tokens.validate_auth_token(token, manager.account_id, NOW):
                accepted.append((pos, bit))
    assert accepted == []


@pytest.mark.slow
def test_tokens_never_cross_validate():
    # 100 keys x 100 tokens = 10^4 wrong-key validation attempts
    keys = [KeyPair.generate() for _ in range(100)]
    signed = [(k, tokens.sign_token(k, {"i": i})) for i, k in enumerate(keys)]
    for signer, token in signed:
        assert tokens.verify_token(token, signer.account_id)
        for other in keys:
            if other is signer:
                continue
            with pytest.raises(OperationError):
                tokens.verify_token(token, other.account_id)
