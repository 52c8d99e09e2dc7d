import pytest
import requests
import yarl

from crag.client import (
    AttestationFailure,
    ClientError,
    CragClient,
    ServerError,
    build_governed_update,
    expected_measurement,
)
from crag.crypto import EnvelopeCiphertext, KeyKind, digest, generate_keypair
from crag.enclave import Platform
from crag.rag import ResponseEnvelope
from crag.records import Visibility

BASE_URL = "http://crag.test:8400"


class FakeResponse:
    def __init__(self, status_code, data, reason="OK"):
        self.status_code = status_code
        self.reason = reason
        self._data = data

    def json(self):
        if self._data is None:
            raise ValueError("no body")
        return self._data


class InProcessSession:
    """Routes client requests straight into a pipeline, no sockets"""

    def __init__(self, platform, enclave, pipeline, store):
        self.platform = platform
        self.enclave = enclave
        self.pipeline = pipeline
        self.store = store
        self.calls = []
        self.overrides = {}
        self.closed = False

    def request(self, method, url, timeout=None, params=None, json=None):
        path = yarl.URL(url).path
        self.calls.append((method, path))
        if path in self.overrides:
            override = self.overrides[path]
            return override(json) if callable(override) else FakeResponse(*override)
        if path == "/v1/attestation":
            report = self.platform.attest(self.enclave, digest(self.enclave.pk_tee))
            return FakeResponse(
                200, {"report": report.hex(), "pk_tee": self.enclave.pk_tee.hex()}
            )
        envelope = EnvelopeCiphertext.from_hex(json["envelope"])
        if path == "/v1/query":
            return FakeResponse(200, self.pipeline.handle_query(envelope).to_dict())
        if path == "/v1/records":
            record_id = self.pipeline.handle_contribution(envelope)
            return FakeResponse(
                201,
                {"record_id": record_id, "created_seq": self.store.live_seq(record_id)},
            )
        record_id = path.split("/")[3]
        return FakeResponse(
            200, {"created_seq": self.pipeline.handle_update(record_id, envelope)}
        )

    def close(self):
        self.closed = True


@pytest.fixture
def session(platform, enclave, pipeline, store):
    return InProcessSession(platform, enclave, pipeline, store)


@pytest.fixture
def make_client(platform, enclave, client_keys, session):
    def build(root_public=None, measurement=None):
        return CragClient(
            BASE_URL,
            root_public or platform.root_public,
            measurement or enclave.measurement,
            "clinic",
            client_keys["clinic"],
            session=session,
        )

    return build


def _posts(session):
    return [path for method, path in session.calls if method == "POST"]


def test_contribute_and_query(make_client, session):
    client = make_client()
    assert client.contribute("r1", "Library opens late on thursdays.") == "r1"
    client.contribute("r2", "Pool closed for cleaning.", Visibility.OPEN)
    assert client.seq_of("r1") == 1
    assert client.update("r1", "Library opens late on thursdays and fridays.") == 3
    assert client.seq_of("r1") == 3
    answer = client.query("When does the library open late?")
    assert answer.provenance == ["r1"]
    assert "fridays" in answer.text
    assert set(answer.provenance) <= set(answer.retrieved)
    assert "fridays" not in repr(answer)
    assert session.calls[0] == ("GET", "/v1/attestation")
    assert session.calls.count(("GET", "/v1/attestation")) == 1
    client.close()
    assert session.closed


def test_update_needs_a_known_seq(make_client, session):
    client = make_client()
    with pytest.raises(ClientError):
        client.update("r1", "Library closed.")
    assert _posts(session) == []
    client.contribute("r1", "Library opens late on thursdays.")
    assert client.update("r1", "Library closed.", expected_seq=1) == 2


def test_wrong_root_aborts_before_sending(make_client, session):
    client = make_client(root_public=Platform.generate().root_public)
    with pytest.raises(AttestationFailure) as info:
        client.query("a private question")
    assert info.value.reason == "bad-root-signature"
    assert _posts(session) == []


def test_measurement_mismatch_aborts(make_client, session):
    client = make_client(measurement=expected_measurement("11" * 32))
    with pytest.raises(AttestationFailure) as info:
        client.contribute("r1", "text")
    assert info.value.reason == "measurement-mismatch"
    assert _posts(session) == []


def test_substituted_pk_is_refused(make_client, session, platform, enclave):
    genuine = platform.attest(enclave, digest(enclave.pk_tee))
    imposter = generate_keypair(KeyKind.AGREEMENT).public_key
    session.overrides["/v1/attestation"] = (
        200,
        {"report": genuine.hex(), "pk_tee": imposter.hex()},
    )
    with pytest.raises(AttestationFailure):
        make_client().verify_server()
    session.overrides["/v1/attestation"] = (200, {"report": "zz", "pk_tee": "00"})
    with pytest.raises(AttestationFailure):
        make_client().verify_server()


def test_response_must_bind_its_ciphertext(make_client, session, platform, enclave):
    def swapped(body):
        envelope = EnvelopeCiphertext.from_hex(body["envelope"])
        response = session.pipeline.handle_query(envelope)
        stale = platform.attest(enclave, digest(b"some other ciphertext"))
        return FakeResponse(200, ResponseEnvelope(response.envelope, stale).to_dict())

    session.overrides["/v1/query"] = swapped
    with pytest.raises(AttestationFailure):
        make_client().query("anything")


def test_server_errors_carry_status(make_client, session):
    session.overrides["/v1/admin/approve"] = (
        409,
        {"error": "DuplicateApproval", "message": "alice already approved"},
        "Conflict",
    )
    client = make_client()
    with pytest.raises(ServerError) as info:
        client._post("v1", "admin", "approve", body={})
    assert info.value.status == 409
    assert info.value.error == "DuplicateApproval"
    assert info.value.governance_refusal

    session.overrides["/v1/audit"] = (502, None, "Bad Gateway")
    with pytest.raises(ServerError) as info:
        client.audit(kind="ingest")
    assert info.value.message == "Bad Gateway"
    assert not info.value.governance_refusal


def test_transport_errors_become_client_errors(make_client, session):
    def refuse(body):
        raise requests.exceptions.ConnectionError("connection refused")

    session.overrides["/v1/attestation"] = refuse
    with pytest.raises(ClientError):
        make_client().verify_server()


def test_identity_is_required_for_writes(platform, enclave, session):
    client = CragClient(
        BASE_URL, platform.root_public, enclave.measurement, session=session
    )
    with pytest.raises(ClientError):
        client.query("hello")
    unpinned = CragClient(BASE_URL, session=session)
    with pytest.raises(ClientError):
        unpinned.verify_server()
    report, pk_tee = unpinned.fetch_report()
    assert pk_tee == enclave.pk_tee
    assert report.measurement == enclave.measurement


def test_governed_update_digest(enclave):
    text_digest, envelope = build_governed_update(enclave.pk_tee, "new text")
    assert text_digest == digest(b"new text").hex()
    assert isinstance(envelope, EnvelopeCiphertext)
