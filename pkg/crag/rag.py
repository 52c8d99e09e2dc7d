# Secure RAG protocol: encrypted query in, encrypted attested response out
#
# One exec extent covers decrypt, authenticate, retrieve, augment, generate
# and re-encrypt. Only the response ciphertext and its attestation leave it.

import abc
import json
import logging
import re
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import attr

from .audit import AuditLog, EventKind
from .crypto import (
    AuthenticationError,
    CryptoError,
    Digest,
    EnvelopeCiphertext,
    Signature,
    digest,
    hybrid_decrypt,
    hybrid_encrypt,
    verify,
)
from .enclave import AttestationReport, EnclaveIdentity, resident_method
from .governance import ExecutedProposal, Governance, Operation
from .records import CommunityRecord, Visibility, record_digest, valid_identifier
from .redaction import Redactor, compile_rules, parse_rules
from .utils import canonical_json
from .vector_store import (
    ContributorClaim,
    EncryptedVectorStore,
    RetrievedChunk,
    Scope,
    StaleUpdate,
)

logger = logging.getLogger(__name__)

QUERY_AAD = b"crag/query/v1"
RESPONSE_AAD = b"crag/response/v1"
CONTRIBUTION_AAD = b"crag/contribution/v1"
UPDATE_AAD = b"crag/update/v1"
GOVERNED_UPDATE_AAD = b"crag/governed-update/v1"

TEMPLATE_ID = "crag-context-v1"
DEFAULT_K = 4
NO_CONTEXT_NOTICE = "No community records are available to answer this question."
NO_MATCH_NOTICE = "None of the retrieved community records address this question."

_WORD = re.compile(r"[a-z0-9]+")
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


class PipelineError(Exception):
    pass


class AuthFailure(PipelineError):
    pass


class DecryptFailure(PipelineError):
    pass


@attr.s(frozen=True, slots=True)
class ClientRegistration:
    client_id: str = attr.ib()
    signing_public: bytes = attr.ib(repr=lambda key: key.hex())
    scope: Visibility = attr.ib(converter=Visibility, default=Visibility.OPEN)

    @property
    def search_scope(self) -> Scope:
        return Scope.BOTH if self.scope is Visibility.PRIVATE else Scope.OPEN


def load_clients(path: Union[str, Path]) -> Dict[str, ClientRegistration]:
    """Clients file: JSON list of {client_id, signing_public (hex), scope}"""
    try:
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
        clients = [
            ClientRegistration(
                entry["client_id"],
                bytes.fromhex(entry["signing_public"]),
                entry.get("scope", "open"),
            )
            for entry in entries
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise PipelineError("Malformed clients file {}: {}".format(path, e)) from e
    registry = {}
    for client in clients:
        if not valid_identifier(client.client_id) or len(client.signing_public) != 32:
            raise PipelineError("Malformed client entry {!r}".format(client.client_id))
        if client.client_id in registry:
            raise PipelineError("Duplicate client id {}".format(client.client_id))
        registry[client.client_id] = client
    return registry


def body_digest(body: Mapping) -> Digest:
    """What a client signs: digest of the canonical JSON body"""
    return digest(canonical_json(body))


@attr.s(frozen=True, slots=True, repr=False)
class UserQuery:
    prompt: str = attr.ib()
    private_context: Optional[str] = attr.ib()
    client_response_key: bytes = attr.ib()
    client_id: str = attr.ib()
    signature: Signature = attr.ib()

    def __repr__(self) -> str:
        return "UserQuery(client_id={})".format(self.client_id)

    def body(self) -> dict:
        return {
            "prompt": self.prompt,
            "private_context": self.private_context,
            "response_key": self.client_response_key.hex(),
            "client_id": self.client_id,
        }

    @classmethod
    def from_body(cls, body: Mapping, signature: Signature) -> "UserQuery":
        try:
            query = cls(
                prompt=body["prompt"],
                private_context=body.get("private_context"),
                client_response_key=bytes.fromhex(body["response_key"]),
                client_id=body["client_id"],
                signature=signature,
            )
        except (KeyError, TypeError, ValueError, CryptoError) as e:
            raise AuthFailure("Query is malformed") from e
        if not isinstance(query.prompt, str) or not query.prompt.strip():
            raise AuthFailure("Query prompt is empty")
        if query.private_context is not None and not isinstance(
            query.private_context, str
        ):
            raise AuthFailure("Private context must be text")
        if len(query.client_response_key) != 32:
            raise AuthFailure("Response key must be 32 bytes")
        return query


@attr.s(frozen=True, slots=True, repr=False)
class AugmentedPrompt:
    template_id: str = attr.ib()
    prompt: str = attr.ib()
    context_blocks: Tuple[Tuple[str, str], ...] = attr.ib(converter=tuple)
    assembled_text: str = attr.ib()

    def __repr__(self) -> str:
        return "AugmentedPrompt(blocks={})".format(
            [record_id for record_id, _ in self.context_blocks]
        )


@attr.s(frozen=True, slots=True, repr=False)
class GeneratedResponse:
    text: str = attr.ib()
    provenance: Tuple[str, ...] = attr.ib(converter=tuple)
    generator_id: str = attr.ib()

    def __repr__(self) -> str:
        return "GeneratedResponse(provenance={})".format(list(self.provenance))


@attr.s(frozen=True, slots=True)
class ResponseEnvelope:
    envelope: EnvelopeCiphertext = attr.ib()
    attestation: AttestationReport = attr.ib()

    def to_dict(self) -> dict:
        return {"envelope": self.envelope.hex(), "attestation": self.attestation.hex()}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ResponseEnvelope":
        return cls(
            EnvelopeCiphertext.from_hex(data["envelope"]),
            AttestationReport.from_hex(data["attestation"]),
        )


def augment_prompt(
    prompt: str, private_context: Optional[str], chunks: Sequence[RetrievedChunk]
) -> AugmentedPrompt:
    lines = ["Answer the question using the community records below.", ""]
    if private_context:
        lines += ["[User context]", private_context, ""]
    lines.append("[Context]")
    for number, chunk in enumerate(chunks, start=1):
        lines += ["<<{}: {}>>".format(number, chunk.record_id), chunk.text, "<<end>>"]
    lines += ["", "[Question]", prompt]
    return AugmentedPrompt(
        template_id=TEMPLATE_ID,
        prompt=prompt,
        context_blocks=[(chunk.record_id, chunk.text) for chunk in chunks],
        assembled_text="\n".join(lines),
    )


def _words(text: str) -> set:
    return set(_WORD.findall(text.lower()))


def split_sentences(text: str) -> List[str]:
    return [s.strip() for s in _SENTENCE_END.split(text.strip()) if s.strip()]


class Generator(abc.ABC):
    generator_id: str

    @abc.abstractmethod
    def generate(self, assembled: AugmentedPrompt) -> GeneratedResponse:
        ...


class ExtractiveGenerator(Generator):
    """Quotes the context sentences sharing the most words with the prompt"""

    generator_id = "extractive-v1"

    def __init__(self, max_sentences: int = 3):
        self.max_sentences = max_sentences

    def generate(self, assembled: AugmentedPrompt) -> GeneratedResponse:
        if not assembled.context_blocks:
            return GeneratedResponse(NO_CONTEXT_NOTICE, (), self.generator_id)
        terms = _words(assembled.prompt)
        candidates = []
        for rank, (record_id, text) in enumerate(assembled.context_blocks):
            for order, sentence in enumerate(split_sentences(text)):
                score = len(_words(sentence) & terms)
                if score > 0:
                    candidates.append((-score, rank, order, record_id, sentence))
        if not candidates:
            return GeneratedResponse(NO_MATCH_NOTICE, (), self.generator_id)
        chosen = sorted(candidates)[: self.max_sentences]
        provenance = []
        for _, _, _, record_id, _ in sorted(chosen, key=lambda c: (c[1], c[2])):
            if record_id not in provenance:
                provenance.append(record_id)
        return GeneratedResponse(
            " ".join(sentence for *_, sentence in chosen), provenance, self.generator_id
        )


def generate(
    assembled: AugmentedPrompt, generator: Optional[Generator] = None
) -> GeneratedResponse:
    return (generator or ExtractiveGenerator()).generate(assembled)


class RagPipeline:
    def __init__(
        self,
        enclave: EnclaveIdentity,
        store: EncryptedVectorStore,
        audit: AuditLog,
        clients: Mapping[str, ClientRegistration],
        attestor: Callable[[Digest], AttestationReport],
        redactor: Redactor,
        k: int = DEFAULT_K,
        provenance: bool = True,
        generator: Optional[Generator] = None,
    ):
        if k < 1:
            raise PipelineError("k must be at least 1")
        self._enclave = enclave
        self._store = store
        self._audit = audit
        self._clients = dict(clients)
        self._attestor = attestor
        self._redactor = redactor
        self.k = k
        self.provenance = provenance
        self.generator = generator or ExtractiveGenerator()

    @property
    def redactor(self) -> Redactor:
        return self._redactor

    def _reject(
        self, actor: str, envelope_digest: Digest, error: Exception
    ) -> Exception:
        self._audit.append_event(
            EventKind.AUTH_FAILURE,
            actor if valid_identifier(actor) else "anonymous",
            [envelope_digest],
        )
        logger.warning("Rejected envelope {}: {}".format(envelope_digest.hex(), error))
        return error

    def _open_signed(
        self, envelope: EnvelopeCiphertext, aad: bytes, envelope_digest: Digest
    ) -> Tuple[dict, Signature, ClientRegistration]:
        try:
            plaintext = hybrid_decrypt(self._enclave.agreement_keys, envelope, aad)
        except AuthenticationError:
            error = DecryptFailure("Envelope does not decrypt")
            raise self._reject("anonymous", envelope_digest, error) from None
        try:
            data = json.loads(plaintext.decode("utf-8"))
            body, signature = data["body"], Signature.from_hex(data["signature"])
            client_id = body["client_id"]
        except (KeyError, TypeError, ValueError, CryptoError):
            error = AuthFailure("Malformed request")
            raise self._reject("anonymous", envelope_digest, error)
        client = self._clients.get(client_id) if isinstance(client_id, str) else None
        if client is None:
            error = AuthFailure("Unknown client")
            raise self._reject("anonymous", envelope_digest, error)
        if not verify(client.signing_public, body_digest(body).value, signature):
            error = AuthFailure("Bad client signature")
            raise self._reject(client.client_id, envelope_digest, error)
        return body, signature, client

    def handle_query(self, envelope: EnvelopeCiphertext) -> ResponseEnvelope:
        return self._enclave.exec(self._handle_query, envelope)

    @resident_method
    def _handle_query(self, envelope: EnvelopeCiphertext) -> ResponseEnvelope:
        envelope_digest = digest(envelope.to_bytes())
        body, signature, client = self._open_signed(
            envelope, QUERY_AAD, envelope_digest
        )
        try:
            query = UserQuery.from_body(body, signature)
        except AuthFailure as e:
            raise self._reject(client.client_id, envelope_digest, e)

        self._audit.append_event(
            EventKind.QUERY_RECEIVED,
            client.client_id,
            [digest(query.prompt.encode("utf-8"))],
        )
        query_text = query.prompt
        if query.private_context and query.private_context.strip():
            query_text = query.prompt + "\n" + query.private_context
        chunks = self._store.retrieve(query_text, self.k, client.search_scope)
        self._audit.append_event(
            EventKind.RETRIEVAL,
            client.client_id,
            [record_digest(chunk.record_id) for chunk in chunks],
        )

        augmented = augment_prompt(query.prompt, query.private_context, chunks)
        response = self.generator.generate(augmented)
        retrieved = [chunk.record_id for chunk in chunks]
        payload = {
            "text": response.text,
            "provenance": list(response.provenance) if self.provenance else [],
            "retrieved": retrieved if self.provenance else [],
            "generator_id": response.generator_id,
        }
        sealed = hybrid_encrypt(
            query.client_response_key, canonical_json(payload), RESPONSE_AAD
        )
        response_digest = digest(sealed.to_bytes())
        attestation = self._attestor(response_digest)
        self._audit.append_event(
            EventKind.RESPONSE, client.client_id, [response_digest]
        )
        logger.info(
            "Answered query from {} with {} chunks, provenance {}".format(
                client.client_id, len(chunks), list(response.provenance)
            )
        )
        return ResponseEnvelope(sealed, attestation)

    def handle_contribution(self, envelope: EnvelopeCiphertext) -> str:
        return self._enclave.exec(self._handle_contribution, envelope)

    @resident_method
    def _handle_contribution(self, envelope: EnvelopeCiphertext) -> str:
        envelope_digest = digest(envelope.to_bytes())
        body, _, client = self._open_signed(envelope, CONTRIBUTION_AAD, envelope_digest)
        try:
            record = CommunityRecord(
                body["record_id"], body["text"], body["visibility"], client.client_id
            )
            if not isinstance(record.text, str):
                raise TypeError("text")
        except (KeyError, TypeError, ValueError):
            error = AuthFailure("Malformed contribution")
            raise self._reject(client.client_id, envelope_digest, error)
        return self._store.ingest(record, self._redactor)

    def handle_update(self, record_id: str, envelope: EnvelopeCiphertext) -> int:
        return self._enclave.exec(self._handle_update, record_id, envelope)

    @resident_method
    def _handle_update(self, record_id: str, envelope: EnvelopeCiphertext) -> int:
        envelope_digest = digest(envelope.to_bytes())
        body, _, client = self._open_signed(envelope, UPDATE_AAD, envelope_digest)
        expected = body.get("expected_seq")
        if (
            body.get("record_id") != record_id
            or not isinstance(body.get("text"), str)
            or not isinstance(expected, int)
            or isinstance(expected, bool)
        ):
            error = AuthFailure("Malformed update")
            raise self._reject(client.client_id, envelope_digest, error)
        claim = ContributorClaim(client.client_id, expected)
        try:
            return self._store.update_record(
                record_id, body["text"], self._redactor, claim
            )
        except StaleUpdate as e:
            # Replayed or raced envelope
            raise self._reject(client.client_id, envelope_digest, e) from None

    def change_rules(
        self, governance: Governance, token: ExecutedProposal, rules_text: str
    ) -> Redactor:
        redactor = compile_rules(parse_rules(rules_text))
        governance.redeem(token, Operation.CHANGE_RULES, {"rules": rules_text})
        self._redactor = redactor
        logger.warning(
            "Redaction rules replaced: {} rules, digest {}".format(
                len(redactor.rules), redactor.digest().hex()
            )
        )
        return redactor

    def handle_governed_update(
        self, record_id: str, envelope: EnvelopeCiphertext, token: ExecutedProposal
    ) -> int:
        return self._enclave.exec(
            self._handle_governed_update, record_id, envelope, token
        )

    @resident_method
    def _handle_governed_update(
        self, record_id: str, envelope: EnvelopeCiphertext, token: ExecutedProposal
    ) -> int:
        try:
            text = hybrid_decrypt(
                self._enclave.agreement_keys, envelope, GOVERNED_UPDATE_AAD
            ).decode("utf-8")
        except (AuthenticationError, UnicodeDecodeError):
            raise self._reject(
                token.proposal_id,
                digest(envelope.to_bytes()),
                DecryptFailure("Replacement text does not decrypt"),
            ) from None
        return self._store.update_record(record_id, text, self._redactor, token)
