# Hash chained, enclave signed audit trail
# Entries hold identifiers and digests only; payload text has no field to live in

import datetime as dt
import enum
import json
import logging
import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import attr
from pytz import utc

from .crypto import Digest, KeyFormatError, Signature, digest, verify
from .records import valid_identifier

logger = logging.getLogger(__name__)


class AuditError(Exception):
    pass


class EventKind(enum.Enum):
    INGEST = "ingest"
    QUERY_RECEIVED = "query-received"
    RETRIEVAL = "retrieval"
    RESPONSE = "response"
    UPDATE = "update"
    DELETE = "delete"
    EXTRACT = "extract"
    PROPOSAL = "proposal"
    APPROVAL = "approval"
    EXECUTION = "execution"
    AUTH_FAILURE = "auth-failure"
    DRIFT_CHECK = "drift-check"
    REGISTER = "register"
    BOOT = "boot"
    QUERY_ABORTED = "query-aborted"


class ChainFault(enum.Enum):
    DIGEST_MISMATCH = "digest-mismatch"
    LINK_MISMATCH = "link-mismatch"
    BAD_SIGNATURE = "bad-signature"
    SEQ_GAP = "seq-gap"
    MALFORMED = "malformed"


@attr.s(frozen=True, slots=True)
class ChainVerdict:
    valid: bool = attr.ib()
    first_bad_seq: Optional[int] = attr.ib(default=None)
    reason: Optional[ChainFault] = attr.ib(default=None)

    def __bool__(self) -> bool:
        return self.valid


def _now_ms() -> int:
    return int(dt.datetime.now(tz=utc).timestamp() * 1000)


def _prefixed(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


@attr.s(frozen=True, slots=True)
class AuditEntry:
    seq: int = attr.ib()
    prev_digest: Digest = attr.ib()
    event_kind: EventKind = attr.ib()
    actor: str = attr.ib()
    subject_digests: Tuple[Digest, ...] = attr.ib(converter=tuple)
    timestamp: int = attr.ib()
    entry_digest: Digest = attr.ib()
    signature: Signature = attr.ib()

    def body_bytes(self) -> bytes:
        return b"".join(
            (
                struct.pack(">Q", self.seq),
                self.prev_digest.value,
                _prefixed(self.event_kind.value.encode("ascii")),
                _prefixed(self.actor.encode("utf-8")),
                struct.pack(">I", len(self.subject_digests)),
                b"".join(subject.value for subject in self.subject_digests),
                struct.pack(">Q", self.timestamp),
            )
        )

    def compute_digest(self) -> Digest:
        return digest(self.body_bytes())

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "prev_digest": self.prev_digest.hex(),
            "event_kind": self.event_kind.value,
            "actor": self.actor,
            "subject_digests": [subject.hex() for subject in self.subject_digests],
            "timestamp": self.timestamp,
            "entry_digest": self.entry_digest.hex(),
            "signature": self.signature.hex(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "AuditEntry":
        try:
            return cls(
                seq=int(data["seq"]),
                prev_digest=Digest.from_hex(data["prev_digest"]),
                event_kind=EventKind(data["event_kind"]),
                actor=str(data["actor"]),
                subject_digests=[Digest.from_hex(s) for s in data["subject_digests"]],
                timestamp=int(data["timestamp"]),
                entry_digest=Digest.from_hex(data["entry_digest"]),
                signature=Signature.from_hex(data["signature"]),
            )
        except (KeyError, TypeError, ValueError, KeyFormatError) as e:
            raise AuditError("Malformed audit entry: {}".format(e)) from e

    @classmethod
    def from_json(cls, line: str) -> "AuditEntry":
        try:
            data = json.loads(line)
        except ValueError as e:
            raise AuditError("Audit line is not JSON") from e
        if not isinstance(data, dict):
            raise AuditError("Audit line is not a JSON object")
        return cls.from_dict(data)

    @classmethod
    def from_line(cls, raw: bytes) -> "AuditEntry":
        """Strict parse of one stored line; only the canonical encoding is accepted"""
        try:
            text = (raw[:-1] if raw.endswith(b"\n") else raw).decode("utf-8")
        except UnicodeDecodeError as e:
            raise AuditError("Audit line is not UTF-8") from e
        entry = cls.from_json(text)
        if entry.to_json() != text:
            raise AuditError("Audit line is not in canonical form")
        return entry


def verify_chain(
    entries: Sequence[AuditEntry], enclave_signing_public: bytes
) -> ChainVerdict:
    prev = Digest.zero()
    for index, entry in enumerate(entries):
        if entry.seq != index:
            return ChainVerdict(False, index, ChainFault.SEQ_GAP)
        if entry.compute_digest() != entry.entry_digest:
            return ChainVerdict(False, index, ChainFault.DIGEST_MISMATCH)
        if entry.prev_digest != prev:
            return ChainVerdict(False, index, ChainFault.LINK_MISMATCH)
        if not verify(
            enclave_signing_public, entry.entry_digest.value, entry.signature
        ):
            return ChainVerdict(False, index, ChainFault.BAD_SIGNATURE)
        prev = entry.entry_digest
    return ChainVerdict(True)


def filter_entries(
    entries: Sequence[AuditEntry],
    kind: Optional[EventKind] = None,
    actor: Optional[str] = None,
    subject: Optional[Digest] = None,
    seq_range: Optional[Tuple[int, int]] = None,
) -> List[AuditEntry]:
    if seq_range is not None:
        start, stop = seq_range
        entries = [e for e in entries if start <= e.seq < stop]
    return [
        entry
        for entry in entries
        if (kind is None or entry.event_kind is kind)
        and (actor is None or entry.actor == actor)
        and (subject is None or subject in entry.subject_digests)
    ]


def load_entries(path: Union[str, Path]) -> List[AuditEntry]:
    entries = []
    with open(path, "rb") as fh:
        for lineno, line in enumerate(fh):
            try:
                entries.append(AuditEntry.from_line(line))
            except AuditError as e:
                raise AuditError("{}:{}: {}".format(path, lineno + 1, e)) from e
    return entries


def verify_file(path: Union[str, Path], enclave_signing_public: bytes) -> ChainVerdict:
    entries = []
    with open(path, "rb") as fh:
        for index, line in enumerate(fh):
            try:
                entries.append(AuditEntry.from_line(line))
            except AuditError:
                # Judge the valid prefix first so an earlier fault still wins
                verdict = verify_chain(entries, enclave_signing_public)
                return verdict if not verdict else ChainVerdict(
                    False, index, ChainFault.MALFORMED
                )
    return verify_chain(entries, enclave_signing_public)


class AuditLog:
    """Append-only JSON Lines log; a lock owns the chain tail"""

    def __init__(
        self,
        path: Optional[Union[str, Path]],
        signer,
        clock: Callable[[], int] = _now_ms,
    ):
        self._path = Path(path) if path is not None else None
        self._signer = signer
        self._clock = clock
        self._lock = threading.Lock()
        self._entries: List[AuditEntry] = []
        self._fh = None
        if self._path is not None:
            if self._path.exists():
                self._entries = load_entries(self._path)
                verdict = verify_chain(self._entries, signer.signing_public)
                if not verdict:
                    raise AuditError(
                        "Audit log {} fails verification at seq {}: {}".format(
                            self._path, verdict.first_bad_seq, verdict.reason.value
                        )
                    )
            self._fh = open(self._path, "a", encoding="utf-8")
        logger.info("Audit log opened with {} entries".format(len(self._entries)))

    @property
    def signing_public(self) -> bytes:
        return self._signer.signing_public

    def __len__(self) -> int:
        return len(self._entries)

    def append_event(
        self, event_kind: EventKind, actor: str, subject_digests: Iterable[Digest]
    ) -> AuditEntry:
        subjects = tuple(subject_digests)
        if not isinstance(event_kind, EventKind):
            raise AuditError("Unknown event kind {!r}".format(event_kind))
        if not valid_identifier(actor):
            raise AuditError("Actor must be an identifier")
        for subject in subjects:
            if not isinstance(subject, Digest):
                raise AuditError(
                    "Audit subjects must be digests, got {}".format(
                        type(subject).__name__
                    )
                )
        subjects = tuple(Digest(subject.value) for subject in subjects)
        with self._lock:
            seq = len(self._entries)
            prev = self._entries[-1].entry_digest if self._entries else Digest.zero()
            draft = AuditEntry(
                seq=seq,
                prev_digest=prev,
                event_kind=event_kind,
                actor=actor,
                subject_digests=subjects,
                timestamp=self._clock(),
                entry_digest=Digest.zero(),
                signature=Signature(bytes(64)),
            )
            entry_digest = draft.compute_digest()
            entry = attr.evolve(
                draft,
                entry_digest=entry_digest,
                signature=self._signer.sign(entry_digest.value),
            )
            if self._fh is not None:
                self._fh.write(entry.to_json() + "\n")
                self._fh.flush()
            self._entries.append(entry)
        logger.debug("Audit {} seq {} by {}".format(event_kind.value, seq, actor))
        return entry

    def entries(self) -> List[AuditEntry]:
        with self._lock:
            return list(self._entries)

    def query_events(
        self,
        kind: Optional[EventKind] = None,
        actor: Optional[str] = None,
        subject: Optional[Digest] = None,
        seq_range: Optional[Tuple[int, int]] = None,
    ) -> List[AuditEntry]:
        return filter_entries(self.entries(), kind, actor, subject, seq_range)

    def verify(self) -> ChainVerdict:
        return verify_chain(self.entries(), self.signing_public)

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.flush()
                self._fh.close()
                self._fh = None
