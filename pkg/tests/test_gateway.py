import asyncio
import json
from concurrent.futures import ThreadPoolExecutor

import attr
import pytest

from crag import gateway
from crag.audit import EventKind
from crag.client import (
    CragClient,
    build_contribution_envelope,
    build_governed_update,
    build_query_envelope,
    build_update_envelope,
    ServerIdentity,
    open_response,
    verify_pk_attestation,
    verify_response,
)
from crag.crypto import KeyKind, digest, generate_keypair
from crag.enclave import AttestationReport, BoundaryViolation
from crag.governance import (
    AdminProposal,
    AlreadyExecuted,
    GovernancePolicy,
    Operation,
    approve,
    sign_proposal_request,
)
from crag.rag import AuthFailure, ResponseEnvelope
from crag.records import CommunityRecord
from crag.vector_store import DuplicateRecord, StoreError

from .conftest import CODE_ID


@pytest.fixture
def service(server_config, platform):
    built = gateway.build_service(server_config, platform=platform, code_id=CODE_ID)
    yield built
    built.close()


@pytest.fixture
async def http(aiohttp_client, service):
    return await aiohttp_client(gateway.make_app(service))


def _contribution(service, keys, record_id, text, visibility="private"):
    envelope = build_contribution_envelope(
        service.enclave.pk_tee, keys, "clinic", record_id, text, visibility
    )
    return {"envelope": envelope.hex()}


async def _propose(http, rep_keys, operation, params, rep_id="alice"):
    signature = sign_proposal_request(rep_keys[rep_id], operation, params)
    resp = await http.post(
        "/v1/admin/propose",
        json={
            "operation": operation.value,
            "params": params,
            "rep_id": rep_id,
            "signature": signature.hex(),
        },
    )
    assert resp.status == 201
    return AdminProposal.from_json(json.dumps((await resp.json())["proposal"]))


def _approvals(service, rep_keys, proposal, signers=("alice", "bob")):
    return [
        json.loads(
            approve(service.governance.policy, proposal, rep_keys[r], r).to_json()
        )
        for r in signers
    ]


async def test_attestation_binds_pk_tee(http, service, platform):
    resp = await http.get("/v1/attestation")
    assert resp.status == 200
    data = await resp.json()
    report = AttestationReport.from_hex(data["report"])
    pk_tee = bytes.fromhex(data["pk_tee"])
    verify_pk_attestation(
        platform.root_public, report, service.enclave.measurement, pk_tee
    )
    assert data["measurement"] == service.enclave.measurement.hex()
    assert bytes.fromhex(data["root_public"]) == platform.root_public
    pk = await (await http.get("/v1/pk")).json()
    assert pk["pk_tee"] == data["pk_tee"]


async def test_contribute_then_query(http, service, platform, client_keys):
    resp = await http.post(
        "/v1/records",
        json=_contribution(
            service, client_keys["clinic"], "r1", "The food pantry opens at noon."
        ),
    )
    assert resp.status == 201
    assert (await resp.json()) == {"record_id": "r1", "created_seq": 1}

    response_keys = generate_keypair(KeyKind.AGREEMENT)
    envelope = build_query_envelope(
        service.enclave.pk_tee,
        client_keys["clinic"],
        "clinic",
        "When does the pantry open?",
        None,
        response_keys.public_key,
    )
    resp = await http.post("/v1/query", json={"envelope": envelope.hex()})
    assert resp.status == 200
    response = ResponseEnvelope.from_dict(await resp.json())
    identity = ServerIdentity(
        service.enclave.pk_tee, service.enclave.signing_public, service.pk_attestation
    )
    verify_response(
        platform.root_public, identity, service.enclave.measurement, response
    )
    payload = open_response(response_keys, response.envelope)
    assert payload["provenance"] == ["r1"]
    assert "noon" in payload["text"]
    assert http.app["inflight"] == {}


async def test_error_statuses(http, service, client_keys):
    body = _contribution(
        service, client_keys["clinic"], "r1", "Bridge closed for repairs."
    )
    assert (await http.post("/v1/records", json=body)).status == 201
    resp = await http.post("/v1/records", json=body)
    assert resp.status == 409
    assert (await resp.json())["error"] == "DuplicateRecord"

    resp = await http.post("/v1/query", data=b"not json")
    assert resp.status == 400
    assert (await http.post("/v1/query", json={"envelope": "zz"})).status == 400
    assert (await http.post("/v1/query", json={})).status == 400

    forged = build_query_envelope(
        service.enclave.pk_tee,
        generate_keypair(KeyKind.SIGNING),
        "clinic",
        "question",
        None,
        bytes(32),
    )
    resp = await http.post("/v1/query", json={"envelope": forged.hex()})
    assert resp.status == 401
    assert (await resp.json())["error"] == "AuthFailure"


def test_status_mapping():
    assert gateway.status_for(AuthFailure("x")) == 401
    assert gateway.status_for(DuplicateRecord("x")) == 409
    assert gateway.status_for(StoreError("x")) == 400
    assert gateway.status_for(AlreadyExecuted("x")) == 409
    assert gateway.status_for(BoundaryViolation("x")) == 500
    assert gateway.status_for(KeyError("x")) == 500


async def test_governed_delete_over_http(http, service, rep_keys, client_keys):
    body = _contribution(
        service, client_keys["clinic"], "r1", "Shelter beds available."
    )
    assert (await http.post("/v1/records", json=body)).status == 201
    params = {"record_id": "r1"}
    proposal = await _propose(http, rep_keys, Operation.DELETE_RECORD, params)

    alice, bob = _approvals(service, rep_keys, proposal)
    resp = await http.post("/v1/admin/approve", json={"approval": alice})
    assert (await resp.json())["approvals"] == 1
    resp = await http.post("/v1/admin/approve", json={"approval": alice})
    assert resp.status == 409

    resp = await http.post(
        "/v1/admin/execute", json={"proposal_id": proposal.proposal_id}
    )
    assert resp.status == 403
    assert (await resp.json())["error"] == "InsufficientApprovals"

    resp = await http.post(
        "/v1/admin/execute",
        json={"proposal_id": proposal.proposal_id, "approvals": [bob]},
    )
    assert resp.status == 200
    data = await resp.json()
    assert data["result"] == {"record_id": "r1", "versions_zeroed": 1}
    assert data["executed"]["approvers"] == ["alice", "bob"]
    assert len(service.store) == 0

    resp = await http.post(
        "/v1/admin/execute",
        json={"proposal_id": proposal.proposal_id, "approvals": [bob]},
    )
    assert resp.status == 409


async def test_unsigned_proposals_are_refused(http, rep_keys):
    params = {"record_id": "r1"}
    signature = sign_proposal_request(rep_keys["bob"], Operation.DELETE_RECORD, params)
    resp = await http.post(
        "/v1/admin/propose",
        json={
            "operation": "delete-record",
            "params": params,
            "rep_id": "alice",
            "signature": signature.hex(),
        },
    )
    assert resp.status == 403
    resp = await http.post("/v1/admin/execute", json={"proposal_id": "missing"})
    assert resp.status == 404


async def test_governed_update_needs_its_envelope(http, service, rep_keys, client_keys):
    body = _contribution(service, client_keys["clinic"], "r1", "Clinic open Monday.")
    assert (await http.post("/v1/records", json=body)).status == 201
    text_digest, envelope = build_governed_update(
        service.enclave.pk_tee, "Clinic open Tuesday."
    )
    params = {"record_id": "r1", "text_digest": text_digest}
    proposal = await _propose(http, rep_keys, Operation.UPDATE_RECORD, params)
    approvals = _approvals(service, rep_keys, proposal)

    resp = await http.post(
        "/v1/admin/execute",
        json={"proposal_id": proposal.proposal_id, "approvals": approvals},
    )
    assert resp.status == 400
    assert service.governance.pending() != []

    resp = await http.post(
        "/v1/admin/execute",
        json={
            "proposal_id": proposal.proposal_id,
            "approvals": approvals,
            "envelope": envelope.hex(),
        },
    )
    assert resp.status == 200
    assert (await resp.json())["result"]["created_seq"] == 2


async def test_policy_rotation_over_http(http, service, rep_keys):
    rotated = GovernancePolicy(service.governance.policy.representatives[:2], 1)
    params = {"policy": rotated.to_json()}
    proposal = await _propose(http, rep_keys, Operation.ROTATE_POLICY, params)
    resp = await http.post(
        "/v1/admin/execute",
        json={
            "proposal_id": proposal.proposal_id,
            "approvals": _approvals(service, rep_keys, proposal),
        },
    )
    assert resp.status == 200
    assert (await resp.json())["result"] == {
        "threshold": 1,
        "representatives": ["alice", "bob"],
    }
    assert service.governance.policy == rotated


async def test_audit_endpoint_filters(http, service, client_keys):
    for record_id in ("r1", "r2"):
        body = _contribution(
            service, client_keys["clinic"], record_id, "Seed library hours."
        )
        assert (await http.post("/v1/records", json=body)).status == 201
    resp = await http.get("/v1/audit", params={"kind": "ingest"})
    data = await resp.json()
    assert [e["event_kind"] for e in data["entries"]] == ["ingest", "ingest"]
    assert data["enclave_signing_public"] == service.enclave.signing_public.hex()

    everything = (await (await http.get("/v1/audit")).json())["entries"]
    assert everything[0]["event_kind"] == EventKind.BOOT.value
    resp = await http.get("/v1/audit", params={"start": 1, "stop": 2})
    ranged = (await resp.json())["entries"]
    assert [e["seq"] for e in ranged] == [1]
    subject = digest(b"r2").hex()
    resp = await http.get("/v1/audit", params={"subject": subject})
    by_subject = (await resp.json())["entries"]
    assert len(by_subject) == 1

    assert (await http.get("/v1/audit", params={"kind": "nope"})).status == 400
    assert (await http.get("/v1/audit", params={"start": "x"})).status == 400


async def test_registry_check_endpoint(http, service):
    service.registry.register("crag-enclave", "v1", service.enclave.measurement)
    data = await (await http.get("/v1/registry/check")).json()
    assert data["status"] == "match" and data["report_verified"]
    assert data["observed"] == service.enclave.measurement.hex()
    data = await (await http.get("/v1/registry/check", params={"version": "v2"})).json()
    assert data["status"] == "unknown-artifact"
    assert data["expected"] is None


async def test_shutdown_aborts_stragglers(service):
    app = gateway.make_app(service)
    straggler = asyncio.ensure_future(asyncio.sleep(30))
    envelope_digest = digest(b"slow query")
    app["inflight"][straggler] = envelope_digest
    await gateway._on_shutdown(app)
    await asyncio.gather(straggler, return_exceptions=True)
    assert straggler.cancelled()
    entry = service.audit.entries()[-1]
    assert entry.event_kind is EventKind.QUERY_ABORTED
    assert entry.subject_digests == (envelope_digest,)


def test_restart_reopens_the_same_state(server_config, platform, redactor):
    first = gateway.build_service(server_config, platform=platform, code_id=CODE_ID)
    first.store.ingest(
        CommunityRecord("r1", "Ferry runs daily.", "open", "council"), redactor
    )
    first.close()
    second = gateway.build_service(server_config, platform=platform, code_id=CODE_ID)
    assert second.enclave.pk_tee == first.enclave.pk_tee
    assert second.audit.verify()
    assert len(second.store) == 1
    second.close()


def test_startup_failures(server_config, platform, tmp_path):
    gateway.build_service(server_config, platform=platform, code_id=CODE_ID).close()
    with pytest.raises(gateway.StartupError) as info:
        gateway.build_service(server_config, platform=platform, code_id=b"other-build")
    assert info.value.subsystem == "audit"

    missing = attr.evolve(
        server_config,
        policy_path=str(tmp_path / "absent.json"),
        audit_path=str(tmp_path / "fresh" / "audit.jsonl"),
    )
    with pytest.raises(gateway.StartupError) as info:
        gateway.build_service(missing, platform=platform, code_id=CODE_ID)
    assert info.value.subsystem == "governance"


def test_load_platform_persists_secrets(server_config):
    platform = gateway.load_platform(server_config)
    again = gateway.load_platform(server_config)
    assert platform.root_public == again.root_public
    assert platform.device_secret == again.device_secret
    pinned = attr.evolve(server_config, root_public="00" * 32)
    with pytest.raises(gateway.StartupError):
        gateway.load_platform(pinned)


def test_code_identity_tracks_sources(tmp_path):
    (tmp_path / "a.py").write_text("x = 1\n")
    before = gateway.code_identity(tmp_path)
    assert gateway.code_identity(tmp_path) == before
    (tmp_path / "a.py").write_text("x = 2\n")
    assert gateway.code_identity(tmp_path) != before


async def test_unappliable_proposal_is_refused_before_approval(
    http, service, rep_keys
):
    params = {"record_id": "r1", "recipient": "zz"}
    signature = sign_proposal_request(
        rep_keys["alice"], Operation.EXTRACT_RECORD, params
    )
    resp = await http.post(
        "/v1/admin/propose",
        json={
            "operation": Operation.EXTRACT_RECORD.value,
            "params": params,
            "rep_id": "alice",
            "signature": signature.hex(),
        },
    )
    assert resp.status == 400
    assert (await resp.json())["error"] == "InvalidParameters"
    assert service.governance.pending() == []


def _update(service, keys, record_id, text, expected_seq):
    envelope = build_update_envelope(
        service.enclave.pk_tee, keys, "clinic", record_id, text, expected_seq
    )
    return {"envelope": envelope.hex()}


async def test_replayed_update_is_a_conflict(http, service, client_keys):
    keys = client_keys["clinic"]
    resp = await http.post(
        "/v1/records", json=_contribution(service, keys, "r1", "Pantry opens at noon.")
    )
    seq = (await resp.json())["created_seq"]
    first = _update(service, keys, "r1", "Pantry opens at one.", seq)
    resp = await http.post("/v1/records/r1/update", json=first)
    assert resp.status == 200
    newer = (await resp.json())["created_seq"]
    resp = await http.post(
        "/v1/records/r1/update",
        json=_update(service, keys, "r1", "Pantry opens at two.", newer),
    )
    assert resp.status == 200

    resp = await http.post("/v1/records/r1/update", json=first)
    assert resp.status == 409
    assert (await resp.json())["error"] == "StaleUpdate"
    assert service.store.live_seq("r1") == newer + 1
    assert service.audit.entries()[-1].event_kind is EventKind.AUTH_FAILURE


LIVE_RECORDS = (
    ("r-pantry", "The food pantry opens at noon on weekdays.", "open"),
    ("r-bus", "The school bus leaves the depot at 7am.", "open"),
    ("r-well", "The well on Hill Road was repaired and is safe.", "open"),
    ("r-clinic", "Clinic notes: two families need pantry deliveries.", "private"),
    ("r-shelter", "Shelter beds are free on the east wing.", "private"),
)
LIVE_PROMPTS = (
    "When does the pantry open?",
    "What time does the school bus leave?",
    "Is the well on Hill Road safe?",
    "Who needs pantry deliveries?",
    "Are shelter beds free?",
)


@pytest.mark.slow
async def test_client_round_trips_against_a_live_gateway(
    aiohttp_server, service, platform, client_keys
):
    server = await aiohttp_server(gateway.make_app(service))
    rounds = 200

    def session():
        client = CragClient(
            str(server.make_url("/")),
            platform.root_public,
            service.enclave.measurement,
            "clinic",
            client_keys["clinic"],
        )
        try:
            for record_id, text, visibility in LIVE_RECORDS:
                client.contribute(record_id, text, visibility)
            client.update("r-bus", "The school bus leaves the depot at 8am.")
            answers = [
                client.query(LIVE_PROMPTS[i % len(LIVE_PROMPTS)])
                for i in range(rounds)
            ]
        finally:
            client.close()
        return answers

    with ThreadPoolExecutor(max_workers=1) as pool:
        answers = await asyncio.get_running_loop().run_in_executor(pool, session)

    known = {record_id for record_id, _, _ in LIVE_RECORDS}
    assert len(answers) == rounds
    for answer in answers:
        assert set(answer.provenance) <= set(answer.retrieved) <= known
        assert answer.generator_id == "extractive-v1"
        assert answer.attestation.measurement == service.enclave.measurement
    assert "8am" in answers[1].text and "7am" not in answers[1].text
    assert len(service.audit.query_events(EventKind.QUERY_RECEIVED)) == rounds
    assert service.audit.verify()
