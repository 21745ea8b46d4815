from __future__ import annotations

import json
from pathlib import Path

import pytest

from svcmarket.client import MarketClient
from svcmarket.keys import KeyPair
from svcmarket.market import LocalStack

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "svcmarket" / "fixtures"


def load_fixture(name: str) -> dict:
    return json.loads((FIXTURES / f"{name}.json").read_text())


@pytest.fixture(scope="session")
def stack(tmp_path_factory):
    """One shared 3-node deployment; tests isolate through fresh keypairs."""
    base = tmp_path_factory.mktemp("stack")
    deployment = LocalStack(base, n_nodes=3, settlement_http=True)
    deployment.start()
    yield deployment
    deployment.stop()


@pytest.fixture
def client(stack) -> MarketClient:
    return MarketClient(stack.endpoints[0])


@pytest.fixture
def tenant(stack, client):
    """A fresh authenticated tenant; returns (client, keypair)."""
    keypair = KeyPair.generate()
    client.create_tenant(keypair, name="test tenant")
    client.authenticate(keypair, "tenant")
    return client, keypair
