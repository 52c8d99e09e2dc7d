# Envelope encrypted vector store
#
# Every record carries its own data key wrapped under a store master key.
# The master key only exists on disk sealed to the enclave identity, and
# embeddings and payloads are decrypted only inside exec extents.
#
# File layout: magic ‖ u32 version ‖ u32 dim, then u32 length ‖ record
# bytes per entry. Updates append; tombstones and zeroing patch in place.

import enum
import logging
import os
import struct
import threading
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import attr

from .audit import AuditLog, EventKind
from .crypto import (
    KEY_SIZE,
    Digest,
    EnvelopeCiphertext,
    WrappedKey,
    aead_decrypt,
    aead_encrypt,
    digest,
    hybrid_encrypt,
    unwrap_data_key,
    wrap_data_key,
)
from .embedder import DEFAULT_DIM, Embedding, embed, normalize_text, similarity
from .enclave import (
    EnclaveIdentity,
    SealedBlob,
    SealingError,
    enclave_resident,
    resident_method,
)
from .governance import ExecutedProposal, Governance, GovernanceError, Operation
from .records import RECORD_ID_WIDTH, CommunityRecord, Visibility, record_digest
from .redaction import Redactor, redact_record
from .utils import operation_timer

logger = logging.getLogger(__name__)

MAGIC = b"CRAGVST1"
VERSION = 1
EXTRACT_AAD = b"crag/extract/v1"

_HEADER = struct.Struct(">8sII")
_U32 = struct.Struct(">I")
_TAIL = struct.Struct(">BBQ")
_VISIBILITY_CODES = {Visibility.PRIVATE: 0, Visibility.OPEN: 1}
_VISIBILITY_BY_CODE = {code: vis for vis, code in _VISIBILITY_CODES.items()}


class StoreError(Exception):
    pass


class DuplicateRecord(StoreError):
    pass


class UnknownRecord(StoreError):
    pass


class Unauthorized(StoreError):
    pass


class StaleUpdate(StoreError):
    pass


@attr.s(auto_exc=True)
class DimensionMismatch(StoreError):
    path: str = attr.ib()
    stored: int = attr.ib()
    configured: int = attr.ib()

    def __str__(self) -> str:
        return "Store {} has dimension {}, configuration asks for {}".format(
            self.path, self.stored, self.configured
        )


class Scope(enum.Enum):
    OPEN = "open"
    PRIVATE = "private"
    BOTH = "both"

    def admits(self, visibility: Visibility) -> bool:
        return self is Scope.BOTH or self.value == visibility.value


@attr.s(frozen=True, slots=True)
class ContributorClaim:
    """An authenticated contributor asking to change their own record.
    With expected_seq set the change applies only to that live version."""

    contributor: str = attr.ib()
    expected_seq: Optional[int] = attr.ib(default=None)


@attr.s(frozen=True, slots=True)
class DeletionReceipt:
    record_id: str = attr.ib()
    versions_zeroed: int = attr.ib()
    proposal_id: str = attr.ib()


@attr.s(frozen=True, slots=True)
class RetrievedChunk:
    record_id: str = attr.ib()
    score: float = attr.ib()
    text: str = attr.ib(repr=False)


def _sealed_repr(value: bytes) -> str:
    return "<{} bytes>".format(len(value))


@attr.s(frozen=True, slots=True)
class EncryptedVectorRecord:
    record_id: str = attr.ib()
    wrapped_key: WrappedKey = attr.ib()
    embedding_ct: bytes = attr.ib(repr=_sealed_repr)
    payload_ct: bytes = attr.ib(repr=_sealed_repr)
    visibility: Visibility = attr.ib()
    tombstone: bool = attr.ib()
    created_seq: int = attr.ib()
    contributor_digest: Digest = attr.ib()

    def to_bytes(self) -> bytes:
        return b"".join(
            (
                self.record_id.encode("utf-8").ljust(RECORD_ID_WIDTH, b"\0"),
                self.wrapped_key.to_bytes(),
                _U32.pack(len(self.embedding_ct)),
                self.embedding_ct,
                _U32.pack(len(self.payload_ct)),
                self.payload_ct,
                _TAIL.pack(
                    _VISIBILITY_CODES[self.visibility],
                    1 if self.tombstone else 0,
                    self.created_seq,
                ),
                self.contributor_digest.value,
            )
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncryptedVectorRecord":
        try:
            pos = RECORD_ID_WIDTH
            record_id = data[:pos].rstrip(b"\0").decode("utf-8")
            wrapped = WrappedKey.from_bytes(data[pos : pos + WrappedKey.SIZE])
            pos += WrappedKey.SIZE
            (length,) = _U32.unpack_from(data, pos)
            embedding_ct = data[pos + 4 : pos + 4 + length]
            pos += 4 + length
            (length,) = _U32.unpack_from(data, pos)
            payload_ct = data[pos + 4 : pos + 4 + length]
            pos += 4 + length
            visibility, tombstone, created_seq = _TAIL.unpack_from(data, pos)
            pos += _TAIL.size
            contributor = Digest(data[pos : pos + 32])
            if pos + 32 != len(data):
                raise ValueError("trailing bytes")
            return cls(
                record_id=record_id,
                wrapped_key=wrapped,
                embedding_ct=embedding_ct,
                payload_ct=payload_ct,
                visibility=_VISIBILITY_BY_CODE[visibility],
                tombstone=bool(tombstone),
                created_seq=created_seq,
                contributor_digest=contributor,
            )
        except (struct.error, KeyError, ValueError, UnicodeDecodeError) as e:
            raise StoreError("Corrupt store record: {}".format(e)) from e

    def zeroed(self) -> "EncryptedVectorRecord":
        return attr.evolve(
            self,
            embedding_ct=bytes(len(self.embedding_ct)),
            payload_ct=bytes(len(self.payload_ct)),
            tombstone=True,
        )


def _aad(record_id: str, created_seq: int, field: bytes) -> bytes:
    return record_id.encode("utf-8") + struct.pack(">Q", created_seq) + field


@enclave_resident
def _fresh_master(enclave: EnclaveIdentity) -> SealedBlob:
    return enclave.seal(os.urandom(KEY_SIZE))


@enclave_resident
def _check_master(store: "EncryptedVectorStore") -> bool:
    store._master()
    return True


class EncryptedVectorStore:
    def __init__(
        self,
        path: Union[str, Path],
        enclave: EnclaveIdentity,
        audit: AuditLog,
        dim: int = DEFAULT_DIM,
        governance: Optional[Governance] = None,
    ):
        self._path = Path(path)
        self._seal_path = self._path.with_name(self._path.name + ".seal")
        self._enclave = enclave
        self._audit = audit
        self._governance = governance
        self.dim = dim
        self._lock = threading.RLock()
        self._live: Dict[str, EncryptedVectorRecord] = {}
        # (file offset of record bytes, record) for every version ever written
        self._versions: List[Tuple[int, EncryptedVectorRecord]] = []
        self._known_ids = set()
        self._next_seq = 1
        with operation_timer("Opening store {}".format(self._path), logger):
            if self._path.exists():
                self._load()
            else:
                self._create()
        try:
            enclave.exec(_check_master, self)
        except SealingError as e:
            raise StoreError(
                "Store master key at {} is sealed to another enclave identity".format(
                    self._seal_path
                )
            ) from e

    @property
    def path(self) -> Path:
        return self._path

    def attach_governance(self, governance: Governance) -> None:
        self._governance = governance

    def __len__(self) -> int:
        with self._lock:
            return len(self._live)

    def _create(self) -> None:
        if self._seal_path.exists():
            raise StoreError(
                "Found sealed key {} without its store file".format(self._seal_path)
            )
        self._path.parent.mkdir(parents=True, exist_ok=True)
        self._sealed_master = self._enclave.exec(_fresh_master, self._enclave)
        self._seal_path.write_bytes(self._sealed_master.to_bytes())
        with open(self._path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, self.dim))
            fh.flush()
            os.fsync(fh.fileno())
        logger.info("Created store {} with dimension {}".format(self._path, self.dim))

    def _load(self) -> None:
        if not self._seal_path.exists():
            raise StoreError("Sealed key {} is missing".format(self._seal_path))
        self._sealed_master = SealedBlob.from_bytes(self._seal_path.read_bytes())
        data = self._path.read_bytes()
        if len(data) < _HEADER.size:
            raise StoreError("Store {} is truncated".format(self._path))
        magic, version, dim = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise StoreError("{} is not a crag store".format(self._path))
        if version != VERSION:
            raise StoreError("Unsupported store version {}".format(version))
        if dim != self.dim:
            raise DimensionMismatch(str(self._path), dim, self.dim)
        pos = _HEADER.size
        while pos < len(data):
            if pos + 4 > len(data):
                raise StoreError("Truncated length prefix at offset {}".format(pos))
            (length,) = _U32.unpack_from(data, pos)
            if pos + 4 + length > len(data):
                raise StoreError("Truncated record at offset {}".format(pos))
            record = EncryptedVectorRecord.from_bytes(data[pos + 4 : pos + 4 + length])
            self._remember(pos + 4, record)
            pos += 4 + length
        logger.info(
            "Loaded store {}: {} live records, {} versions".format(
                self._path, len(self._live), len(self._versions)
            )
        )

    def _remember(self, offset: int, record: EncryptedVectorRecord) -> None:
        self._versions.append((offset, record))
        self._known_ids.add(record.record_id)
        self._next_seq = max(self._next_seq, record.created_seq + 1)
        if record.tombstone:
            self._live.pop(record.record_id, None)
        else:
            self._live[record.record_id] = record

    def _append(self, record: EncryptedVectorRecord) -> None:
        body = record.to_bytes()
        with open(self._path, "ab") as fh:
            offset = fh.tell()
            fh.write(_U32.pack(len(body)) + body)
            fh.flush()
            os.fsync(fh.fileno())
        self._remember(offset + 4, record)

    def _patch(self, index: int, record: EncryptedVectorRecord) -> None:
        offset, old = self._versions[index]
        body = record.to_bytes()
        if len(body) != len(old.to_bytes()):
            raise StoreError("In-place patch must keep the record length")
        with open(self._path, "r+b") as fh:
            fh.seek(offset)
            fh.write(body)
            fh.flush()
            os.fsync(fh.fileno())
        self._versions[index] = (offset, record)

    def _tombstone_live(self, record_id: str) -> None:
        for index, (_, record) in enumerate(self._versions):
            if record.record_id == record_id and not record.tombstone:
                self._patch(index, attr.evolve(record, tombstone=True))
        self._live.pop(record_id, None)

    def snapshot(self) -> List[EncryptedVectorRecord]:
        with self._lock:
            return list(self._live.values())

    def versions(self, record_id: str) -> List[EncryptedVectorRecord]:
        with self._lock:
            return [r for _, r in self._versions if r.record_id == record_id]

    def live_seq(self, record_id: str) -> int:
        with self._lock:
            current = self._live.get(record_id)
            if current is None:
                raise UnknownRecord("No live record {}".format(record_id))
            return current.created_seq

    def _master(self) -> bytes:
        return self._enclave.unseal(self._sealed_master)

    def _seal_record(
        self,
        record_id: str,
        text: str,
        visibility: Visibility,
        contributor_digest: Digest,
        created_seq: int,
    ) -> EncryptedVectorRecord:
        vector = embed(text, self.dim)
        data_key = os.urandom(KEY_SIZE)
        return EncryptedVectorRecord(
            record_id=record_id,
            wrapped_key=wrap_data_key(self._master(), data_key),
            embedding_ct=aead_encrypt(
                data_key, vector.to_bytes(), _aad(record_id, created_seq, b"embedding")
            ),
            payload_ct=aead_encrypt(
                data_key, text.encode("utf-8"), _aad(record_id, created_seq, b"payload")
            ),
            visibility=visibility,
            tombstone=False,
            created_seq=created_seq,
            contributor_digest=contributor_digest,
        )

    def _open_field(
        self, master: bytes, record: EncryptedVectorRecord, field: bytes
    ) -> bytes:
        data_key = unwrap_data_key(master, record.wrapped_key)
        sealed = record.embedding_ct if field == b"embedding" else record.payload_ct
        aad = _aad(record.record_id, record.created_seq, field)
        return aead_decrypt(data_key, sealed, aad)

    @staticmethod
    def _retrieval_text(record: CommunityRecord, redactor: Redactor) -> str:
        if not normalize_text(record.text):
            raise StoreError("Record {} has no text".format(record.record_id))
        if record.visibility is Visibility.PRIVATE:
            return redact_record(redactor, record).redacted_text
        return record.text

    def ingest(self, record: CommunityRecord, redactor: Redactor) -> str:
        return self._enclave.exec(self._ingest, record, redactor)

    @resident_method
    def _ingest(self, record: CommunityRecord, redactor: Redactor) -> str:
        text = self._retrieval_text(record, redactor)
        with self._lock:
            if record.record_id in self._known_ids:
                raise DuplicateRecord(
                    "Record id {} already used".format(record.record_id)
                )
            sealed = self._seal_record(
                record.record_id,
                text,
                record.visibility,
                digest(record.contributor.encode("utf-8")),
                self._next_seq,
            )
            self._append(sealed)
            self._audit.append_event(
                EventKind.INGEST,
                record.contributor,
                [record_digest(record.record_id), digest(text.encode("utf-8"))],
            )
        logger.info(
            "Ingested {} record {} at seq {}".format(
                record.visibility.value, record.record_id, sealed.created_seq
            )
        )
        return record.record_id

    def search_topk(
        self, query_text: str, k: int, scope: Scope = Scope.BOTH
    ) -> List[Tuple[str, float]]:
        return self._enclave.exec(self._search_topk, query_text, k, scope)

    def _rank(
        self,
        records: List[EncryptedVectorRecord],
        master: bytes,
        query_text: str,
        k: int,
        scope: Scope,
    ) -> List[Tuple[EncryptedVectorRecord, float]]:
        if not isinstance(k, int) or k < 1:
            raise StoreError("k must be a positive integer, got {!r}".format(k))
        records = [r for r in records if not r.tombstone and scope.admits(r.visibility)]
        if not records:
            return []
        query = embed(query_text, self.dim)
        scored = []
        for record in records:
            vector = Embedding.from_bytes(
                self._open_field(master, record, b"embedding"), self.dim
            )
            scored.append((record, similarity(query, vector)))
        scored.sort(key=lambda item: (-item[1], item[0].record_id))
        return scored[:k]

    @resident_method
    def _search_topk(
        self, query_text: str, k: int, scope: Scope = Scope.BOTH
    ) -> List[Tuple[str, float]]:
        ranked = self._rank(self.snapshot(), self._master(), query_text, k, scope)
        return [(record.record_id, score) for record, score in ranked]

    @resident_method
    def fetch_texts(self, record_ids: Iterable[str]) -> Dict[str, str]:
        live = {r.record_id: r for r in self.snapshot()}
        master = self._master()
        texts = {}
        for record_id in record_ids:
            record = live.get(record_id)
            if record is None:
                raise UnknownRecord("No live record {}".format(record_id))
            payload = self._open_field(master, record, b"payload")
            texts[record_id] = payload.decode("utf-8")
        return texts

    @resident_method
    def retrieve(
        self, query_text: str, k: int, scope: Scope = Scope.BOTH
    ) -> List[RetrievedChunk]:
        """Top-k with texts attached; only callable inside an exec extent

        Scores and texts come from the same snapshot, so a concurrent update
        or delete never splits a chunk across versions"""
        master = self._master()
        ranked = self._rank(self.snapshot(), master, query_text, k, scope)
        return [
            RetrievedChunk(
                record.record_id,
                score,
                self._open_field(master, record, b"payload").decode("utf-8"),
            )
            for record, score in ranked
        ]

    def _require_governance(self) -> Governance:
        if self._governance is None:
            raise Unauthorized("Store has no governance attached")
        return self._governance

    def update_record(
        self,
        record_id: str,
        new_text: str,
        redactor: Redactor,
        authorization: Union[ContributorClaim, ExecutedProposal, None],
    ) -> int:
        return self._enclave.exec(
            self._update_record, record_id, new_text, redactor, authorization
        )

    @resident_method
    def _update_record(
        self,
        record_id: str,
        new_text: str,
        redactor: Redactor,
        authorization: Union[ContributorClaim, ExecutedProposal, None],
    ) -> int:
        with self._lock:
            current = self._live.get(record_id)
            if current is None:
                raise UnknownRecord("No live record {}".format(record_id))
            if not normalize_text(new_text):
                raise StoreError("Record {} has no text".format(record_id))
            if current.visibility is Visibility.PRIVATE:
                text, _ = redactor.redact_text(new_text)
            else:
                text = new_text
            if isinstance(authorization, ContributorClaim):
                actor = authorization.contributor
                if digest(actor.encode("utf-8")) != current.contributor_digest:
                    raise Unauthorized(
                        "{} did not contribute {}".format(actor, record_id)
                    )
                expected = authorization.expected_seq
                if expected is not None and expected != current.created_seq:
                    raise StaleUpdate(
                        "Record {} is at seq {}, update expected {}".format(
                            record_id, current.created_seq, expected
                        )
                    )
            elif isinstance(authorization, ExecutedProposal):
                try:
                    self._require_governance().redeem(
                        authorization,
                        Operation.UPDATE_RECORD,
                        {
                            "record_id": record_id,
                            "text_digest": digest(new_text.encode("utf-8")).hex(),
                        },
                    )
                except GovernanceError as e:
                    raise Unauthorized(str(e)) from e
                actor = authorization.proposal_id
            else:
                raise Unauthorized(
                    "Updating {} needs an authorization".format(record_id)
                )
            old_text = self._open_field(self._master(), current, b"payload")
            replacement = self._seal_record(
                record_id,
                text,
                current.visibility,
                current.contributor_digest,
                self._next_seq,
            )
            self._tombstone_live(record_id)
            self._append(replacement)
            self._audit.append_event(
                EventKind.UPDATE,
                actor,
                [
                    record_digest(record_id),
                    digest(old_text),
                    digest(text.encode("utf-8")),
                ],
            )
        logger.info(
            "Updated record {} to seq {}".format(record_id, replacement.created_seq)
        )
        return replacement.created_seq

    def delete_record(
        self, record_id: str, executed_proposal: Optional[ExecutedProposal]
    ) -> DeletionReceipt:
        with self._lock:
            if record_id not in self._live:
                raise UnknownRecord("No live record {}".format(record_id))
            self._require_governance().redeem(
                executed_proposal, Operation.DELETE_RECORD, {"record_id": record_id}
            )
            zeroed = 0
            for index, (_, record) in enumerate(self._versions):
                if record.record_id == record_id:
                    self._patch(index, record.zeroed())
                    zeroed += 1
            self._live.pop(record_id, None)
            self._audit.append_event(
                EventKind.DELETE,
                executed_proposal.proposal_id,
                [record_digest(record_id)],
            )
        logger.info("Deleted record {} ({} versions zeroed)".format(record_id, zeroed))
        return DeletionReceipt(record_id, zeroed, executed_proposal.proposal_id)

    def extract_record(
        self,
        record_id: str,
        recipient_public: bytes,
        executed_proposal: Optional[ExecutedProposal],
    ) -> EnvelopeCiphertext:
        return self._enclave.exec(
            self._extract_record, record_id, recipient_public, executed_proposal
        )

    @resident_method
    def _extract_record(
        self,
        record_id: str,
        recipient_public: bytes,
        executed_proposal: Optional[ExecutedProposal],
    ) -> EnvelopeCiphertext:
        with self._lock:
            if record_id not in self._live:
                raise UnknownRecord("No live record {}".format(record_id))
            self._require_governance().redeem(
                executed_proposal,
                Operation.EXTRACT_RECORD,
                {"record_id": record_id, "recipient": recipient_public.hex()},
            )
            text = self.fetch_texts([record_id])[record_id]
            envelope = hybrid_encrypt(
                recipient_public, text.encode("utf-8"), EXTRACT_AAD
            )
            self._audit.append_event(
                EventKind.EXTRACT,
                executed_proposal.proposal_id,
                [record_digest(record_id), digest(envelope.to_bytes())],
            )
        logger.info("Extracted record {} for governed recipient".format(record_id))
        return envelope

    def compact(self) -> int:
        """Rewrite the file with live versions only; returns versions dropped

        Each deleted id keeps one empty tombstone at its last sequence number
        so ids stay retired and created_seq stays monotone across reopen."""
        with self._lock, operation_timer("Compacting {}".format(self._path), logger):
            retired: Dict[str, EncryptedVectorRecord] = {}
            for _, record in self._versions:
                if record.record_id in self._live:
                    continue
                last = retired.get(record.record_id)
                if last is None or record.created_seq > last.created_seq:
                    retired[record.record_id] = record
            markers = [
                attr.evolve(record.zeroed(), embedding_ct=b"", payload_ct=b"")
                for record in retired.values()
            ]
            live = sorted(
                list(self._live.values()) + markers, key=lambda r: r.created_seq
            )
            dropped = len(self._versions) - len(live)
            staging = self._path.with_name(self._path.name + ".compact")
            with open(staging, "wb") as fh:
                fh.write(_HEADER.pack(MAGIC, VERSION, self.dim))
                offsets = []
                for record in live:
                    body = record.to_bytes()
                    offsets.append(fh.tell() + 4)
                    fh.write(_U32.pack(len(body)) + body)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(staging, self._path)
            self._versions = list(zip(offsets, live))
        logger.info(
            "Compacted store {}: dropped {} versions".format(self._path, dropped)
        )
        return dropped

    def close(self) -> None:
        # Every write is fsynced as it happens; nothing is buffered
        logger.info(
            "Store {} closed with {} live records".format(self._path, len(self))
        )

