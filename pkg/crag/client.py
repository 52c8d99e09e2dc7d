# Client side of the protocol: envelopes out, attested envelopes back
#
# Nothing carrying prompt or record text is sent until the server's startup
# attestation has verified against the expected measurement.

import json
import logging
from typing import Dict, Iterable, List, Mapping, Optional

import attr
import requests
import yarl

from .crypto import (
    CryptoError,
    Digest,
    EnvelopeCiphertext,
    KeyKind,
    KeyPair,
    digest,
    generate_keypair,
    hybrid_decrypt,
    hybrid_encrypt,
    sign,
)
from .enclave import AttestationReport, EnclaveError, Measurement, verify_report
from .governance import (
    AdminProposal,
    Approval,
    ExecutedProposal,
    Operation,
    parse_operation,
    sign_proposal_request,
)
from .rag import (
    CONTRIBUTION_AAD,
    GOVERNED_UPDATE_AAD,
    QUERY_AAD,
    RESPONSE_AAD,
    UPDATE_AAD,
    ResponseEnvelope,
    body_digest,
)
from .records import Visibility
from .utils import canonical_json
from .vector_store import EXTRACT_AAD

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30


class ClientError(Exception):
    pass


@attr.s(auto_exc=True)
class AttestationFailure(ClientError):
    reason: str = attr.ib()

    def __str__(self) -> str:
        return "Attestation failed: {}".format(self.reason)


@attr.s(auto_exc=True)
class ServerError(ClientError):
    status: int = attr.ib()
    error: str = attr.ib()
    message: str = attr.ib()

    def __str__(self) -> str:
        return "Server answered {} {}: {}".format(self.status, self.error, self.message)

    @property
    def governance_refusal(self) -> bool:
        return self.status in (403, 409)


@attr.s(frozen=True, slots=True)
class ServerIdentity:
    """What the client learned and verified from GET /v1/attestation"""

    pk_tee: bytes = attr.ib(repr=lambda key: key.hex())
    enclave_signing_public: bytes = attr.ib(repr=lambda key: key.hex())
    report: AttestationReport = attr.ib()


@attr.s(frozen=True, slots=True, repr=False)
class QueryAnswer:
    text: str = attr.ib()
    provenance: List[str] = attr.ib(converter=list)
    retrieved: List[str] = attr.ib(converter=list)
    generator_id: str = attr.ib()
    attestation: AttestationReport = attr.ib()

    def __repr__(self) -> str:
        return "QueryAnswer(provenance={})".format(self.provenance)


def _signed_plaintext(signing_keys: KeyPair, body: Mapping) -> bytes:
    signature = sign(signing_keys, body_digest(body).value)
    return canonical_json({"body": dict(body), "signature": signature.hex()})


def build_query_envelope(
    pk_tee: bytes,
    signing_keys: KeyPair,
    client_id: str,
    prompt: str,
    private_context: Optional[str],
    response_public: bytes,
) -> EnvelopeCiphertext:
    body = {
        "prompt": prompt,
        "private_context": private_context,
        "response_key": response_public.hex(),
        "client_id": client_id,
    }
    return hybrid_encrypt(pk_tee, _signed_plaintext(signing_keys, body), QUERY_AAD)


def build_contribution_envelope(
    pk_tee: bytes,
    signing_keys: KeyPair,
    client_id: str,
    record_id: str,
    text: str,
    visibility: Visibility = Visibility.PRIVATE,
) -> EnvelopeCiphertext:
    body = {
        "record_id": record_id,
        "text": text,
        "visibility": Visibility(visibility).value,
        "client_id": client_id,
    }
    return hybrid_encrypt(
        pk_tee, _signed_plaintext(signing_keys, body), CONTRIBUTION_AAD
    )


def build_update_envelope(
    pk_tee: bytes,
    signing_keys: KeyPair,
    client_id: str,
    record_id: str,
    text: str,
    expected_seq: int,
) -> EnvelopeCiphertext:
    """Signed replacement of the live version at expected_seq only"""
    body = {
        "record_id": record_id,
        "text": text,
        "expected_seq": expected_seq,
        "client_id": client_id,
    }
    return hybrid_encrypt(pk_tee, _signed_plaintext(signing_keys, body), UPDATE_AAD)


def build_governed_update(pk_tee: bytes, text: str):
    """Replacement text for an update-record proposal: (params digest, envelope)"""
    data = text.encode("utf-8")
    return (
        digest(data).hex(),
        hybrid_encrypt(pk_tee, data, GOVERNED_UPDATE_AAD),
    )


def open_response(response_keys: KeyPair, envelope: EnvelopeCiphertext) -> dict:
    payload = json.loads(hybrid_decrypt(response_keys, envelope, RESPONSE_AAD))
    for field in ("text", "provenance", "retrieved", "generator_id"):
        if field not in payload:
            raise ClientError("Response payload has no {}".format(field))
    return payload


def open_extract(recipient_keys: KeyPair, envelope: EnvelopeCiphertext) -> str:
    return hybrid_decrypt(recipient_keys, envelope, EXTRACT_AAD).decode("utf-8")


def verify_pk_attestation(
    root_public: bytes,
    report: AttestationReport,
    expected: Digest,
    pk_tee: bytes,
) -> None:
    verdict = verify_report(root_public, report, expected)
    if not verdict:
        raise AttestationFailure(verdict.reason.value)
    if report.report_data != digest(pk_tee):
        raise AttestationFailure("published pk_TEE is not bound by the report")


def verify_response(
    root_public: bytes,
    identity: ServerIdentity,
    expected: Digest,
    response: ResponseEnvelope,
) -> None:
    report = response.attestation
    verdict = verify_report(root_public, report, expected)
    if not verdict:
        raise AttestationFailure(verdict.reason.value)
    if report.enclave_signing_public != identity.enclave_signing_public:
        raise AttestationFailure("response attested by a different enclave")
    if report.report_data != digest(response.envelope.to_bytes()):
        raise AttestationFailure("report does not bind the response ciphertext")


class CragClient:
    def __init__(
        self,
        base_url: str,
        root_public: Optional[bytes] = None,
        expected_measurement: Optional[Digest] = None,
        client_id: Optional[str] = None,
        signing_keys: Optional[KeyPair] = None,
        session: Optional[requests.Session] = None,
        timeout: float = DEFAULT_TIMEOUT,
    ):
        self._url = yarl.URL(base_url)
        self._root_public = root_public
        self._expected: Optional[Digest] = None
        if expected_measurement is not None:
            self._expected = Digest(expected_measurement.value)
        self._client_id = client_id
        self._signing_keys = signing_keys
        self._session = session or requests.Session()
        self._timeout = timeout
        self._identity: Optional[ServerIdentity] = None
        self._seqs: Dict[str, int] = {}

    def _endpoint(self, *parts: str) -> str:
        url = self._url
        for part in parts:
            url = url / part
        return str(url)

    def _request(self, method: str, parts: Iterable[str], **kwargs) -> dict:
        url = self._endpoint(*parts)
        try:
            response = self._session.request(
                method, url, timeout=self._timeout, **kwargs
            )
        except requests.exceptions.RequestException as e:
            raise ClientError("{} {} failed: {}".format(method, url, e)) from e
        try:
            data = response.json()
        except ValueError:
            data = {}
        if response.status_code >= 400:
            raise ServerError(
                response.status_code,
                data.get("error", "HTTPError"),
                data.get("message", response.reason or ""),
            )
        return data

    def _get(self, *parts: str, params: Optional[Mapping] = None) -> dict:
        return self._request("GET", parts, params=params)

    def _post(self, *parts: str, body: Mapping) -> dict:
        return self._request("POST", parts, json=body)

    def _require_client(self):
        if self._client_id is None or self._signing_keys is None:
            raise ClientError("A client id and signing key are required")
        return self._client_id, self._signing_keys

    def fetch_report(self):
        """Unverified (report, pk_TEE) as published by the server"""
        data = self._get("v1", "attestation")
        try:
            report = AttestationReport.from_hex(data["report"])
            return report, bytes.fromhex(data["pk_tee"])
        except (KeyError, TypeError, ValueError, EnclaveError) as e:
            raise AttestationFailure("malformed attestation: {}".format(e)) from e

    def verify_server(self) -> ServerIdentity:
        if self._root_public is None or self._expected is None:
            raise ClientError("A root key and expected measurement are required")
        report, pk_tee = self.fetch_report()
        verify_pk_attestation(self._root_public, report, self._expected, pk_tee)
        self._identity = ServerIdentity(pk_tee, report.enclave_signing_public, report)
        logger.info(
            "Verified enclave {} at {}".format(report.measurement.hex(), self._url)
        )
        return self._identity

    @property
    def identity(self) -> ServerIdentity:
        return self._identity or self.verify_server()

    def query(self, prompt: str, private_context: Optional[str] = None) -> QueryAnswer:
        client_id, signing_keys = self._require_client()
        identity = self.identity
        response_keys = generate_keypair(KeyKind.AGREEMENT)
        envelope = build_query_envelope(
            identity.pk_tee,
            signing_keys,
            client_id,
            prompt,
            private_context,
            response_keys.public_key,
        )
        data = self._post("v1", "query", body={"envelope": envelope.hex()})
        try:
            response = ResponseEnvelope.from_dict(data)
        except (KeyError, TypeError, CryptoError, EnclaveError) as e:
            raise ClientError("Malformed response: {}".format(e)) from e
        verify_response(self._root_public, identity, self._expected, response)
        payload = open_response(response_keys, response.envelope)
        if not set(payload["provenance"]) <= set(payload["retrieved"]):
            raise ClientError("Response cites records that were not retrieved")
        return QueryAnswer(
            text=payload["text"],
            provenance=payload["provenance"],
            retrieved=payload["retrieved"],
            generator_id=payload["generator_id"],
            attestation=response.attestation,
        )

    def contribute(
        self, record_id: str, text: str, visibility: Visibility = Visibility.PRIVATE
    ) -> str:
        client_id, signing_keys = self._require_client()
        envelope = build_contribution_envelope(
            self.identity.pk_tee, signing_keys, client_id, record_id, text, visibility
        )
        data = self._post("v1", "records", body={"envelope": envelope.hex()})
        self._seqs[data["record_id"]] = data["created_seq"]
        return data["record_id"]

    def seq_of(self, record_id: str) -> Optional[int]:
        """Last created_seq this client saw for record_id"""
        return self._seqs.get(record_id)

    def update(
        self, record_id: str, text: str, expected_seq: Optional[int] = None
    ) -> int:
        client_id, signing_keys = self._require_client()
        if expected_seq is None:
            expected_seq = self._seqs.get(record_id)
        if expected_seq is None:
            raise ClientError("Current seq of {} is not known".format(record_id))
        envelope = build_update_envelope(
            self.identity.pk_tee, signing_keys, client_id, record_id, text, expected_seq
        )
        data = self._post(
            "v1", "records", record_id, "update", body={"envelope": envelope.hex()}
        )
        self._seqs[record_id] = data["created_seq"]
        return data["created_seq"]

    def propose(
        self, rep_id: str, rep_keys: KeyPair, operation, params: Mapping[str, str]
    ) -> AdminProposal:
        operation: Operation = parse_operation(operation)
        signature = sign_proposal_request(rep_keys, operation, params)
        data = self._post(
            "v1",
            "admin",
            "propose",
            body={
                "operation": operation.value,
                "params": dict(params),
                "rep_id": rep_id,
                "signature": signature.hex(),
            },
        )
        return AdminProposal.from_json(json.dumps(data["proposal"]))

    def approve(self, approval: Approval) -> dict:
        return self._post(
            "v1", "admin", "approve", body={"approval": json.loads(approval.to_json())}
        )

    def execute(
        self,
        proposal_id: str,
        approvals: Iterable[Approval] = (),
        envelope: Optional[EnvelopeCiphertext] = None,
    ) -> dict:
        body = {
            "proposal_id": proposal_id,
            "approvals": [json.loads(approval.to_json()) for approval in approvals],
        }
        if envelope is not None:
            body["envelope"] = envelope.hex()
        data = self._post("v1", "admin", "execute", body=body)
        data["executed"] = ExecutedProposal.from_dict(data["executed"])
        return data

    def audit(self, **filters) -> dict:
        params = {
            name: str(value) for name, value in filters.items() if value is not None
        }
        return self._get("v1", "audit", params=params)

    def registry_check(
        self, name: Optional[str] = None, version: Optional[str] = None
    ) -> dict:
        params = {"name": name, "version": version}
        return self._get(
            "v1",
            "registry",
            "check",
            params={key: value for key, value in params.items() if value is not None},
        )

    def close(self) -> None:
        self._session.close()


def expected_measurement(hex_value: str) -> Measurement:
    return Measurement(Digest.from_hex(hex_value).value)
