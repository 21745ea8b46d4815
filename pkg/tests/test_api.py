"""End-to-end HTTP API: status mapping, authz, hygiene, payments."""

import time

import pytest
import requests

from svcmarket import tokens
from svcmarket.canonical import canonical_json
from svcmarket.client import ApiError, MarketClient
from svcmarket.errors import (
    ALREADY_EXISTS,
    ALREADY_PAID,
    CALLBACK_REJECTED,
    CALLBACK_TIMEOUT,
    CHARGE_MISMATCH,
    DUPLICATE_SUBSCRIPTION,
    DURATION_EXCEEDED,
    GRANT_EXPIRED,
    INVALID_SIGNATURE,
    MALFORMED_CONTACT,
    MALFORMED_KEY,
    MALFORMED_REQUEST,
    MALFORMED_TOKEN,
    NOT_FOUND,
    QUOTA_EXCEEDED,
    ROLE_MISMATCH,
    SKEWED_TIMESTAMP,
    TOKEN_EXPIRED,
)
from svcmarket.harness import HarnessService
from svcmarket.keys import KeyPair
from svcmarket.market.http import STATUS_BY_CODE
from svcmarket.usage import records_digest

from conftest import load_fixture
from helpers import free_port, wait_until
from test_usage_billing import EGRESS, MEMORY, usage_record

RESOURCE = "small-process"
MONTH = 30 * 24 * 3600


def fresh_tenant(stack, *, credential=None, name="api tenant"):
    keypair = KeyPair.generate()
    client = MarketClient(stack.endpoints[0])
    client.create_tenant(keypair, name=name, charging_credential=credential)
    client.authenticate(keypair, "tenant")
    return client, keypair


def service_client(stack, keypair) -> MarketClient:
    client = MarketClient(stack.endpoints[0])
    client.authenticate(keypair, "service")
    return client


def api_error(fn, *args, **kwargs) -> ApiError:
    with pytest.raises(ApiError) as excinfo:
        fn(*args, **kwargs)
    return excinfo.value


def commit_height(stack) -> int:
    return max(node.ledger.status()["commit_index"] for node in stack.nodes)


def push_usage(stack, service: HarnessService, tenant_account, elements, metric=MEMORY):
    records = [usage_record(service.account_id, tenant_account, metric, elements)]
    signature = service.keypair.sign(records_digest(records).encode("ascii"))
    return service_client(stack, service.keypair).post_metrics(records, signature)


@pytest.fixture
def provider(stack):
    """Factory for registered mock services; stops them all afterwards."""
    created = []

    def make(policy="approve", **overrides):
        overrides.setdefault("name", f"provider-{len(created)}")
        service = HarnessService(
            resources=[load_fixture(RESOURCE)],
            marketplace_url=stack.endpoints[0],
            policy=policy,
            **overrides,
        )
        service.register_with_marketplace()
        created.append(service)
        return service

    yield make
    for service in created:
        service.stop()


class TestStatusMapping:
    def test_every_error_code_has_its_contractual_status(self):
        expected = {
            "MALFORMED_REQUEST": 400,
            "MALFORMED_KEY": 400,
            "MALFORMED_CONTACT": 400,
            "MALFORMED_RESOURCE": 400,
            "MALFORMED_TOKEN": 400,
            "TOKEN_EXPIRED": 401,
            "INVALID_SIGNATURE": 401,
            "SKEWED_TIMESTAMP": 401,
            "GRANT_EXPIRED": 401,
            "ROLE_MISMATCH": 403,
            "NOT_FOUND": 404,
            "OUT_OF_RANGE": 404,
            "ALREADY_EXISTS": 409,
            "DUPLICATE_SUBSCRIPTION": 409,
            "ALREADY_PAID": 409,
            "STALE_NONCE": 409,
            "CALLBACK_REJECTED": 422,
            "CALLBACK_TIMEOUT": 422,
            "QUOTA_EXCEEDED": 422,
            "OVERFLOW": 422,
            "DURATION_EXCEEDED": 422,
            "CHARGE_MISMATCH": 422,
            "INSUFFICIENT_FUNDS": 422,
            "BROKEN_CHAIN": 422,
            "NO_LEADER": 503,
            "LOST_LEADERSHIP": 503,
        }
        assert STATUS_BY_CODE == expected

    def test_non_json_body_is_rejected(self, stack):
        resp = requests.post(f"{stack.endpoints[0]}/tenants", data=b"not json", timeout=10)
        assert resp.status_code == 400
        body = resp.json()
        assert body["error"]["code"] == MALFORMED_REQUEST
        assert body["request_id"]

    def test_non_object_body_is_rejected(self, stack):
        resp = requests.post(f"{stack.endpoints[0]}/tenants", data=b"[1,2]", timeout=10)
        assert resp.status_code == 400
        assert resp.json()["error"]["code"] == MALFORMED_REQUEST

    def test_unknown_service_is_404(self, client):
        error = api_error(client.get_service, KeyPair.generate().account_id)
        assert (error.status, error.code) == (404, NOT_FOUND)

    def test_responses_are_canonical_json(self, stack):
        for path in ("/status", "/services"):
            resp = requests.get(stack.endpoints[0] + path, timeout=10)
            assert resp.content == canonical_json(resp.json())
        resp = requests.post(f"{stack.endpoints[0]}/tenants", data=b"{", timeout=10)
        assert resp.content == canonical_json(resp.json())


class TestAuthentication:
    def test_login_returns_a_marketplace_signed_token(self, stack, tenant):
        client, keypair = tenant
        out = client.authenticate(keypair, "tenant")
        claims = tokens.validate_auth_token(
            out["token"], stack.manager.account_id, int(time.time())
        )
        assert claims["sub"] == keypair.account_id
        assert claims["role"] == "tenant"
        assert out["exp"] - out["iat"] == 3600

    def test_unregistered_key_cannot_log_in(self, stack):
        client = MarketClient(stack.endpoints[0])
        error = api_error(client.authenticate, KeyPair.generate(), "tenant")
        assert (error.status, error.code) == (404, NOT_FOUND)

    def test_logging_in_under_the_other_role_is_refused(self, stack, tenant):
        _, keypair = tenant
        client = MarketClient(stack.endpoints[0])
        error = api_error(client.authenticate, keypair, "service")
        assert (error.status, error.code) == (403, ROLE_MISMATCH)

    def test_stale_assertion_is_refused(self, stack):
        keypair = KeyPair.generate()
        client = MarketClient(stack.endpoints[0])
        error = api_error(
            client.create_tenant, keypair, name="late", now=int(time.time()) - 1000
        )
        assert (error.status, error.code) == (401, SKEWED_TIMESTAMP)

    def test_missing_token_is_401(self, stack):
        error = api_error(MarketClient(stack.endpoints[0]).list_delegations)
        assert (error.status, error.code) == (401, INVALID_SIGNATURE)

    def test_garbage_token_is_400(self, stack):
        client = MarketClient(stack.endpoints[0], token="definitely.not.atoken")
        error = api_error(client.list_delegations)
        assert (error.status, error.code) == (400, MALFORMED_TOKEN)

    def test_expired_token_is_401(self, stack, tenant):
        _, keypair = tenant
        stale = tokens.issue_auth_token(
            stack.manager, keypair.account_id, "tenant", int(time.time()) - 7200, 3600
        )
        error = api_error(MarketClient(stack.endpoints[0], token=stale).list_delegations)
        assert (error.status, error.code) == (401, TOKEN_EXPIRED)

    def test_token_signed_by_anyone_else_is_401(self, stack, tenant):
        _, keypair = tenant
        forged = tokens.issue_auth_token(
            KeyPair.generate(), keypair.account_id, "tenant", int(time.time()), 3600
        )
        error = api_error(MarketClient(stack.endpoints[0], token=forged).list_delegations)
        assert (error.status, error.code) == (401, INVALID_SIGNATURE)

    def test_role_gates_on_endpoints(self, stack, tenant, provider):
        tenant_client, _ = tenant
        error = api_error(tenant_client.post_quota, [])
        assert (error.status, error.code) == (403, ROLE_MISMATCH)
        svc = provider()
        error = api_error(service_client(stack, svc.keypair).list_delegations)
        assert (error.status, error.code) == (403, ROLE_MISMATCH)

    def test_tenants_read_only_their_own_contract(self, stack, tenant):
        client_a, _ = tenant
        _, keypair_b = fresh_tenant(stack, name="other tenant")
        error = api_error(client_a.get_tenant, keypair_b.account_id)
        assert (error.status, error.code) == (403, ROLE_MISMATCH)


class TestTenantEndpoints:
    def test_create_get_delete_roundtrip(self, stack):
        keypair = KeyPair.generate()
        client = MarketClient(stack.endpoints[0])
        created = client.create_tenant(
            keypair, name="roundtrip", email="rt@example.org", phone="123"
        )
        assert created["tenant"]["account_id"] == keypair.account_id
        client.authenticate(keypair, "tenant")
        doc = client.get_tenant(keypair.account_id)["tenant"]
        assert doc["name"] == "roundtrip"
        assert doc["email"] == "rt@example.org"
        assert doc["active"] is True
        client.delete_tenant(keypair.account_id)
        error = api_error(client.get_tenant, keypair.account_id)
        assert (error.status, error.code) == (404, NOT_FOUND)

    def test_create_answers_201(self, stack):
        keypair = KeyPair.generate()
        assertion = tokens.make_assertion(keypair, "tenant", int(time.time()))
        resp = requests.post(
            f"{stack.endpoints[0]}/tenants",
            data=canonical_json(
                {
                    "account": keypair.account_id,
                    "name": "registered over raw http",
                    "email": "raw@example.org",
                    "phone": "1",
                    "charging_credential": "raw-credential",
                    "assertion": assertion,
                }
            ),
            timeout=10,
        )
        assert resp.status_code == 201

    def test_duplicate_registration_conflicts_without_growing_the_chain(self, stack, tenant):
        _, keypair = tenant
        before = commit_height(stack)
        error = api_error(
            MarketClient(stack.endpoints[0]).create_tenant, keypair, name="again"
        )
        assert (error.status, error.code) == (409, ALREADY_EXISTS)
        assert commit_height(stack) == before

    def test_empty_contact_field_is_rejected(self, stack):
        keypair = KeyPair.generate()
        error = api_error(
            MarketClient(stack.endpoints[0]).create_tenant, keypair, name=""
        )
        assert (error.status, error.code) == (400, MALFORMED_CONTACT)

    def test_invalid_public_key_is_rejected(self, stack):
        resp = requests.post(
            f"{stack.endpoints[0]}/tenants",
            data=canonical_json({"account": "deadbeef", "name": "x"}),
            timeout=10,
        )
        assert resp.status_code == 400
        assert resp.json()["error"]["code"] == MALFORMED_KEY


class TestServiceCatalog:
    def test_registration_publishes_cosigned_documents(self, stack, client, provider):
        keypair = KeyPair.generate()
        created = MarketClient(stack.endpoints[0]).create_service(
            keypair,
            name="catalog check",
            callback_url="http://example.invalid/callback",
            service_url="http://example.invalid/",
            settlement_account="unused",
            resource_documents=[load_fixture(RESOURCE)],
        )
        doc = client.get_service(keypair.account_id)["service"]
        assert doc["name"] == "catalog check"
        offered = doc["resources"][RESOURCE]
        assert offered["document"] == load_fixture(RESOURCE)
        claims = tokens.verify_document_token(offered["token"], keypair.account_id)
        assert claims["doc"] == offered["document"]
        # the offer is anchored by a root delegation the marketplace co-signed
        [root] = created["root_delegations"]
        assert root["depth"] == 0
        assert root["grantee"] == stack.manager.account_id
        accepted = tokens.verify_document_token(
            root["grantee_token"], stack.manager.account_id
        )
        assert accepted["doc"] == offered["document"]

    def test_listing_pages_concatenate_to_the_full_catalog(self, stack, client, provider):
        ours = {provider().account_id for _ in range(3)}
        full = client.list_services()["services"]
        assert ours <= {s["account_id"] for s in full}
        keys = [(s["created_at"], s["account_id"]) for s in full]
        assert keys == sorted(keys)
        paged = []
        offset = 0
        while True:
            page = client.list_services(offset=offset, limit=2)["services"]
            if not page:
                break
            assert len(page) <= 2
            paged.extend(page)
            offset += len(page)
        assert paged == full

    def test_deletion_requires_the_service_own_token(self, stack, tenant, provider):
        svc = provider()
        tenant_client, _ = tenant
        error = api_error(tenant_client.delete_service, svc.account_id)
        assert (error.status, error.code) == (403, ROLE_MISMATCH)
        other = provider()
        error = api_error(
            service_client(stack, other.keypair).delete_service, svc.account_id
        )
        assert (error.status, error.code) == (403, ROLE_MISMATCH)
        svc.deregister()
        error = api_error(
            MarketClient(stack.endpoints[0]).get_service, svc.account_id
        )
        assert (error.status, error.code) == (404, NOT_FOUND)


class TestGrants:
    def test_grant_claims_and_defaults(self, stack, tenant, provider):
        svc = provider()
        client, keypair = tenant
        grant = client.create_grant(svc.account_id, RESOURCE)
        claims = tokens.verify_token(grant["grant_token"], stack.manager.account_id)
        assert claims == grant["claims"]
        assert claims["service"] == svc.account_id
        assert claims["sub"] == keypair.account_id
        assert claims["resource"] == RESOURCE
        assert claims["exp"] - claims["iat"] == 600
        assert claims["max_duration_s"] == MONTH
        assert claims["allowed_subdelegations"] == 0
        assert grant["resource_document"] == load_fixture(RESOURCE)

    def test_requested_duration_is_echoed(self, tenant, provider):
        svc = provider()
        client, _ = tenant
        grant = client.create_grant(svc.account_id, RESOURCE, duration_s=3600)
        assert grant["claims"]["max_duration_s"] == 3600

    def test_duration_above_the_cap_is_refused(self, stack, tenant, provider):
        svc = provider()
        client, _ = tenant
        before = commit_height(stack)
        error = api_error(
            client.create_grant, svc.account_id, RESOURCE, duration_s=MONTH + 1
        )
        assert (error.status, error.code) == (422, DURATION_EXCEEDED)
        assert commit_height(stack) == before

    def test_subdelegation_rights_clamp_to_depth_headroom(self, tenant, provider):
        svc = provider()
        client, _ = tenant
        grant = client.create_grant(svc.account_id, RESOURCE, subdelegations=5)
        assert grant["claims"]["allowed_subdelegations"] == 0
        assert grant["claims"]["requested_subdelegations"] == 5

    def test_grant_for_unknown_resource_is_404(self, tenant, provider):
        svc = provider()
        client, _ = tenant
        error = api_error(client.create_grant, svc.account_id, "no-such-resource")
        assert (error.status, error.code) == (404, NOT_FOUND)


class TestSubscriptions:
    def test_subscribing_creates_delegation_and_instance(self, stack, tenant, provider):
        svc = provider()
        client, keypair = tenant
        delegation = client.subscribe(keypair, svc.account_id, RESOURCE)["delegation"]
        assert delegation["grantee"] == keypair.account_id
        assert delegation["service"] == svc.account_id
        assert delegation["resource_name"] == RESOURCE
        assert delegation["depth"] == 1
        assert delegation["status"] == "active"
        assert delegation["expires_at"] == delegation["created_at"] + MONTH
        # the callback announced exactly the id the ledger then recorded
        assert delegation["delegation_id"] in svc.running_instance_ids()
        listed = client.list_delegations()["delegations"]
        assert [d["delegation_id"] for d in listed] == [delegation["delegation_id"]]
        assert listed[0]["service_name"] == svc.name
        assert listed[0]["service_url"] == svc.service_url

    def test_double_subscription_conflicts(self, stack, tenant, provider):
        svc = provider()
        client, keypair = tenant
        client.subscribe(keypair, svc.account_id, RESOURCE)
        before = commit_height(stack)
        error = api_error(client.subscribe, keypair, svc.account_id, RESOURCE)
        assert (error.status, error.code) == (409, DUPLICATE_SUBSCRIPTION)
        assert commit_height(stack) == before
        assert len(client.list_delegations()["delegations"]) == 1

    def test_expired_grant_is_refused(self, stack, tenant, provider):
        svc = provider()
        client, keypair = tenant
        stale = tokens.sign_token(
            stack.manager,
            {
                "service": svc.account_id,
                "sub": keypair.account_id,
                "resource": RESOURCE,
                "iat": int(time.time()) - 700,
                "exp": int(time.time()) - 100,
                "max_duration_s": MONTH,
                "allowed_subdelegations": 0,
            },
        )
        acceptance = tokens.sign_document(keypair, load_fixture(RESOURCE))
        error = api_error(client.create_delegation, stale, acceptance)
        assert (error.status, error.code) == (401, GRANT_EXPIRED)
        assert client.list_delegations()["delegations"] == []
        assert svc.running_instance_ids() == set()

    def test_grant_issued_to_someone_else_is_refused(self, stack, tenant, provider):
        svc = provider()
        client_a, _ = tenant
        client_b, keypair_b = fresh_tenant(stack, name="interloper")
        grant = client_a.create_grant(svc.account_id, RESOURCE)
        acceptance = tokens.sign_document(keypair_b, grant["resource_document"])
        error = api_error(client_b.create_delegation, grant["grant_token"], acceptance)
        assert (error.status, error.code) == (401, INVALID_SIGNATURE)

    def test_acceptance_must_cover_the_offered_document(self, tenant, provider):
        svc = provider()
        client, keypair = tenant
        grant = client.create_grant(svc.account_id, RESOURCE)
        acceptance = tokens.sign_document(keypair, {"resource": {"name": "fake"}})
        error = api_error(client.create_delegation, grant["grant_token"], acceptance)
        assert (error.status, error.code) == (401, INVALID_SIGNATURE)

    def test_rejected_callback_leaves_no_delegation(self, stack, tenant, provider):
        svc = provider(policy="reject", reject_reason="at capacity")
        client, keypair = tenant
        error = api_error(client.subscribe, keypair, svc.account_id, RESOURCE)
        assert (error.status, error.code) == (422, CALLBACK_REJECTED)
        assert "at capacity" in error.message
        assert client.list_delegations()["delegations"] == []
        assert svc.running_instance_ids() == set()

    def test_unreachable_callback_maps_to_timeout(self, stack, tenant):
        keypair = KeyPair.generate()
        registrar = MarketClient(stack.endpoints[0])
        registrar.create_service(
            keypair,
            name="gone fishing",
            callback_url=f"http://127.0.0.1:{free_port()}/callback",
            service_url="http://example.invalid/",
            settlement_account="unused",
            resource_documents=[load_fixture(RESOURCE)],
        )
        client, tenant_keypair = tenant
        error = api_error(client.subscribe, tenant_keypair, keypair.account_id, RESOURCE)
        assert (error.status, error.code) == (422, CALLBACK_TIMEOUT)
        assert client.list_delegations()["delegations"] == []

    def test_unsubscribing_stops_the_instance(self, stack, tenant, provider):
        svc = provider()
        client, keypair = tenant
        delegation = client.subscribe(keypair, svc.account_id, RESOURCE)["delegation"]
        out = client.delete_delegation(svc.account_id, RESOURCE)
        assert out["delegation"]["status"] == "deleted"
        assert out["delegation"]["deleted_at"] >= delegation["created_at"]
        assert client.list_delegations()["delegations"] == []
        wait_until(
            lambda: svc.running_instance_ids() == set(),
            message="unsubscribe callback to stop the instance",
        )


class TestAnyNodeServes:
    def test_reads_after_writes_hold_on_every_node(self, stack, tenant):
        client, keypair = tenant
        for endpoint in stack.endpoints:
            doc = client._request(
                "GET", f"/tenants/{keypair.account_id}", base_url=endpoint
            )
            assert doc["tenant"]["account_id"] == keypair.account_id

    def test_each_node_accepts_writes(self, stack):
        accounts = []
        for endpoint in stack.endpoints:
            keypair = KeyPair.generate()
            node_client = MarketClient(endpoint)
            node_client.create_tenant(keypair, name=f"via {endpoint}")
            node_client.authenticate(keypair, "tenant")
            accounts.append((node_client, keypair))
        for node_client, keypair in accounts:
            for endpoint in stack.endpoints:
                doc = node_client._request(
                    "GET", f"/tenants/{keypair.account_id}", base_url=endpoint
                )
                assert doc["tenant"]["active"] is True

    def test_statuses_agree_on_a_single_leader(self, stack):
        statuses = [requests.get(f"{u}/status", timeout=10).json() for u in stack.endpoints]
        assert len({s["node_id"] for s in statuses}) == 3
        leaders = {s["leader_id"] for s in statuses}
        assert len(leaders) == 1
        assert sum(1 for s in statuses if s["role"] == "leader") == 1
        for s in statuses:
            assert s["operator"] and s["manager"] == stack.manager.account_id

    def test_subscription_through_a_follower(self, stack, provider):
        svc = provider()
        follower = next(
            url
            for url in stack.endpoints
            if requests.get(f"{url}/status", timeout=10).json()["role"] != "leader"
        )
        keypair = KeyPair.generate()
        client = MarketClient(follower)
        client.create_tenant(keypair, name="follower tenant")
        client.authenticate(keypair, "tenant")
        delegation = client.subscribe(keypair, svc.account_id, RESOURCE)["delegation"]
        assert delegation["delegation_id"] in svc.running_instance_ids()


class TestUsageEndpoints:
    @pytest.fixture
    def world(self, stack, tenant, provider):
        svc = provider()
        client, keypair = tenant
        delegation = client.subscribe(keypair, svc.account_id, RESOURCE)["delegation"]
        return svc, client, keypair, delegation

    def test_metrics_roundtrip(self, stack, world):
        svc, client, keypair, _ = world
        now = int(time.time())
        out = push_usage(
            stack, svc, keypair.account_id, [(3, now - 120, now - 60), (4, now - 60, now)]
        )
        assert out["duplicate"] is False
        assert out["anchor_tx"]
        consolidated = client.query_metrics(
            svc.account_id, RESOURCE, "consolidated", now - 3600, now + 60
        )["records"]
        [memory] = [r for r in consolidated if r["metric"] == "memory_gb_hours"]
        [total] = memory["usage"]
        assert total["unitsUsed"] == 7
        assert total["charge"] == 84
        detailed = client.query_metrics(
            svc.account_id, RESOURCE, "detailed", now - 3600, now + 60
        )["records"]
        elements = [u for r in detailed for u in r["usage"]]
        assert sorted(e["unitsUsed"] for e in elements) == [3, 4]

    def test_same_batch_twice_is_flagged_and_not_double_counted(self, stack, world):
        svc, client, keypair, _ = world
        now = int(time.time())
        records = [usage_record(svc.account_id, keypair.account_id, EGRESS, [(5, now - 10, now)])]
        signature = svc.keypair.sign(records_digest(records).encode("ascii"))
        pusher = service_client(stack, svc.keypair)
        first = pusher.post_metrics(records, signature)
        second = pusher.post_metrics(records, signature)
        assert first["batch_id"] == second["batch_id"]
        assert first["duplicate"] is False
        assert second["duplicate"] is True
        consolidated = client.query_metrics(
            svc.account_id, RESOURCE, "consolidated", now - 3600, now + 60
        )["records"]
        [egress] = [r for r in consolidated if r["metric"] == "egress_gb"]
        assert egress["usage"][0]["unitsUsed"] == 5

    def test_metric_push_rejects_a_foreign_signature(self, stack, world):
        svc, client, keypair, _ = world
        now = int(time.time())
        records = [usage_record(svc.account_id, keypair.account_id, MEMORY, [(1, now - 5, now)])]
        signature = KeyPair.generate().sign(records_digest(records).encode("ascii"))
        before = commit_height(stack)
        error = api_error(service_client(stack, svc.keypair).post_metrics, records, signature)
        assert (error.status, error.code) == (401, INVALID_SIGNATURE)
        assert commit_height(stack) == before
        assert (
            client.query_metrics(svc.account_id, RESOURCE, "detailed", now - 5, now + 5)["records"]
            == []
        )

    def test_wrong_charge_is_rejected(self, stack, world):
        svc, _, keypair, _ = world
        now = int(time.time())
        record = usage_record(svc.account_id, keypair.account_id, MEMORY, [(2, now - 5, now)])
        record["usage"][0]["charge"] = 25
        signature = svc.keypair.sign(records_digest([record]).encode("ascii"))
        error = api_error(service_client(stack, svc.keypair).post_metrics, [record], signature)
        assert (error.status, error.code) == (422, CHARGE_MISMATCH)

    def test_outsiders_cannot_query_usage(self, stack, world):
        svc, _, _, _ = world
        other, _ = fresh_tenant(stack, name="nosy")
        error = api_error(other.query_metrics, svc.account_id, RESOURCE, "consolidated", 0, 10)
        assert (error.status, error.code) == (404, NOT_FOUND)
        error = api_error(other.query_quota, svc.account_id, RESOURCE)
        assert (error.status, error.code) == (404, NOT_FOUND)

    def test_quota_consumption_and_limit(self, stack, world):
        svc, client, keypair, _ = world

        def standing():
            records = client.query_quota(svc.account_id, RESOURCE)["records"]
            return {r["quota_attribute"]: (r["unitsUsed"], r["quota"]) for r in records}

        assert standing() == {"cpu_seconds": (0, 2000), "vm_instances": (0, 10)}

        def consume(attribute, units):
            return service_client(stack, svc.keypair).post_quota(
                [
                    {
                        "tenant": keypair.account_id,
                        "resource_name": RESOURCE,
                        "quota_attribute": attribute,
                        "unitsUsed": units,
                    }
                ]
            )

        assert consume("cpu_seconds", 1500) == {"updated": 1}
        assert standing()["cpu_seconds"] == (1500, 2000)
        before = commit_height(stack)
        error = api_error(consume, "cpu_seconds", 600)
        assert (error.status, error.code) == (422, QUOTA_EXCEEDED)
        assert commit_height(stack) == before
        assert consume("cpu_seconds", 500) == {"updated": 1}
        assert standing()["cpu_seconds"] == (2000, 2000)
        assert consume("vm_instances", 10) == {"updated": 1}
        error = api_error(consume, "vm_instances", 1)
        assert (error.status, error.code) == (422, QUOTA_EXCEEDED)

    def test_integrity_endpoint_reports_clean_for_anchored_batches(self, stack, world):
        svc, client, keypair, _ = world
        now = int(time.time())
        push_usage(stack, svc, keypair.account_id, [(2, now - 10, now)])
        report = client.usage_integrity(svc.account_id)
        assert report["clean"] is True
        assert report["findings"] == []
        assert report["checked"] >= 1


class TestBillingAndPayments:
    def test_final_bill_and_exact_settlement(self, stack, provider):
        chain = stack.settlement
        svc = provider()
        credential = f"buyer-{svc.account_id[:8]}"
        chain.create_account(credential, 1_000)
        chain.create_account(svc.settlement_account, 0)
        decoy = chain.create_account(balance=1_000)
        client, keypair = fresh_tenant(stack, credential=credential, name="payer")
        client.subscribe(keypair, svc.account_id, RESOURCE)
        now = int(time.time())
        push_usage(stack, svc, keypair.account_id, [(7, now - 30, now)])
        time.sleep(1.5)  # the element must end strictly before deletion
        client.delete_delegation(svc.account_id, RESOURCE)

        [bill] = client.list_bills(service=svc.account_id)["bills"]
        assert bill["total"] == 84
        assert bill["currency"] == "EUR"
        assert bill["status"] == "unpaid"
        by_metric = {line["metric"]: line for line in bill["line_items"]}
        assert by_metric["memory_gb_hours"]["unitsUsed"] == 7
        assert by_metric["memory_gb_hours"]["charge"] == 84
        assert by_metric["egress_gb"]["unitsUsed"] == 0
        assert bill["period_end"] > bill["period_start"]

        out = client.register_payment(bill["bill_id"], "EUR", 84)
        assert out == {"registered": True, "bill_id": bill["bill_id"], "settled": False}

        def current():
            return client.list_bills(bill_id=bill["bill_id"])["bills"][0]

        # short transfers and transfers from strangers must not settle
        chain.transfer(credential, svc.settlement_account, 83)
        chain.transfer(decoy, svc.settlement_account, 84)
        chain.drain()
        time.sleep(0.3)
        assert current()["status"] == "unpaid"
        event = chain.transfer(credential, svc.settlement_account, 84)
        wait_until(lambda: current()["status"] == "paid", message="bill settlement")
        paid = current()
        assert paid["payment_ref"] == event["event_id"]
        assert chain.balance(svc.settlement_account) == 83 + 84 + 84
        error = api_error(client.register_payment, bill["bill_id"], "EUR", 84)
        assert (error.status, error.code) == (409, ALREADY_PAID)

    def test_overpaying_transfer_settles(self, stack, provider):
        chain = stack.settlement
        svc = provider()
        credential = f"buyer2-{svc.account_id[:8]}"
        chain.create_account(credential, 1_000)
        chain.create_account(svc.settlement_account, 0)
        client, keypair = fresh_tenant(stack, credential=credential, name="generous")
        client.subscribe(keypair, svc.account_id, RESOURCE)
        now = int(time.time())
        push_usage(stack, svc, keypair.account_id, [(2, now - 30, now)], metric=EGRESS)
        time.sleep(1.5)
        client.delete_delegation(svc.account_id, RESOURCE)
        [bill] = client.list_bills(service=svc.account_id)["bills"]
        assert bill["total"] == 18
        client.register_payment(bill["bill_id"], "EUR", 50)
        chain.transfer(credential, svc.settlement_account, 50)
        wait_until(
            lambda: client.list_bills(bill_id=bill["bill_id"])["bills"][0]["status"] == "paid",
            message="overpaid bill settlement",
        )

    def test_zero_usage_bill_settles_immediately(self, stack, tenant, provider):
        svc = provider()
        client, keypair = tenant
        client.subscribe(keypair, svc.account_id, RESOURCE)
        time.sleep(1.1)  # a zero-length final period would not be billable
        client.delete_delegation(svc.account_id, RESOURCE)
        [bill] = client.list_bills(service=svc.account_id)["bills"]
        assert bill["total"] == 0
        assert [line["unitsUsed"] for line in bill["line_items"]] == [0, 0]
        out = client.register_payment(bill["bill_id"], "EUR", 0)
        assert out["settled"] is True
        wait_until(
            lambda: client.list_bills(bill_id=bill["bill_id"])["bills"][0]["status"] == "paid",
            message="zero-total bill settlement",
        )
        error = api_error(client.register_payment, bill["bill_id"], "EUR", 0)
        assert (error.status, error.code) == (409, ALREADY_PAID)

    def test_payment_declaration_gates(self, stack, tenant, provider):
        svc = provider()
        client, keypair = tenant
        client.subscribe(keypair, svc.account_id, RESOURCE)
        now = int(time.time())
        push_usage(stack, svc, keypair.account_id, [(1, now - 30, now)])
        time.sleep(1.5)
        client.delete_delegation(svc.account_id, RESOURCE)
        [bill] = client.list_bills(service=svc.account_id)["bills"]
        assert bill["total"] == 12
        error = api_error(client.register_payment, bill["bill_id"], "EUR", 11)
        assert (error.status, error.code) == (400, MALFORMED_REQUEST)
        error = api_error(client.register_payment, bill["bill_id"], "USD", 12)
        assert (error.status, error.code) == (400, MALFORMED_REQUEST)
        error = api_error(client.register_payment, "no-such-bill", "EUR", 12)
        assert (error.status, error.code) == (404, NOT_FOUND)
        stranger, _ = fresh_tenant(stack, name="stranger")
        error = api_error(stranger.register_payment, bill["bill_id"], "EUR", 12)
        assert (error.status, error.code) == (404, NOT_FOUND)

    def test_bill_listing_is_scoped_and_filterable(self, stack, tenant, provider):
        svc = provider()
        client, keypair = tenant
        client.subscribe(keypair, svc.account_id, RESOURCE)
        time.sleep(1.1)
        client.delete_delegation(svc.account_id, RESOURCE)
        [bill] = client.list_bills(service=svc.account_id)["bills"]
        assert client.list_bills(paid=True, bill_id=bill["bill_id"])["bills"] == []
        assert (
            client.list_bills(paid=False, bill_id=bill["bill_id"])["bills"][0]["bill_id"]
            == bill["bill_id"]
        )
        # the service sees the same bill through its own scope
        seen = service_client(stack, svc.keypair).list_bills(resource=RESOURCE)["bills"]
        assert bill["bill_id"] in {b["bill_id"] for b in seen}
        # tenants never see other tenants' bills
        other, _ = fresh_tenant(stack, name="unrelated")
        assert other.list_bills(bill_id=bill["bill_id"])["bills"] == []
