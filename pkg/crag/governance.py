# Threshold approved administration
#
# Representatives co-sign a proposal with independent Ed25519 keys. Once at
# least `threshold` distinct valid approvals exist the enclave executes the
# proposal, issuing a signed single-use token the gated operations redeem.

import enum
import json
import logging
import os
import struct
import threading
import uuid
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import attr
from sqlalchemy import Boolean, Column, ForeignKey, Integer, String, Text, func, select

from .audit import AuditLog, EventKind
from .crypto import (
    Digest,
    KeyFormatError,
    KeyPair,
    Signature,
    digest,
    sign,
    verify,
)
from .records import valid_identifier
from .redaction import RedactionError, compile_rules, parse_rules
from .utils import Base

logger = logging.getLogger(__name__)

NONCE_BYTES = 16


class GovernanceError(Exception):
    pass


class UnknownOperation(GovernanceError):
    pass


class ProposalNotFound(GovernanceError):
    pass


class UnknownRepresentative(GovernanceError):
    pass


class DuplicateApproval(GovernanceError):
    pass


class InvalidApproval(GovernanceError):
    pass


class AlreadyExecuted(GovernanceError):
    pass


class TokenRejected(GovernanceError):
    pass


class InvalidParameters(GovernanceError):
    pass


@attr.s(auto_exc=True)
class InsufficientApprovals(GovernanceError):
    proposal_id: str = attr.ib()
    have: int = attr.ib()
    need: int = attr.ib()

    def __str__(self) -> str:
        return "Proposal {} has {} valid approvals, needs {}".format(
            self.proposal_id, self.have, self.need
        )


class Operation(enum.Enum):
    DELETE_RECORD = "delete-record"
    EXTRACT_RECORD = "extract-record"
    CHANGE_RULES = "change-rules"
    ROTATE_POLICY = "rotate-policy"
    UPDATE_RECORD = "update-record"


REQUIRED_PARAMS = {
    Operation.DELETE_RECORD: ("record_id",),
    Operation.EXTRACT_RECORD: ("record_id", "recipient"),
    Operation.CHANGE_RULES: ("rules",),
    Operation.ROTATE_POLICY: ("policy",),
    Operation.UPDATE_RECORD: ("record_id", "text_digest"),
}


def parse_operation(operation: Union[str, Operation]) -> Operation:
    if isinstance(operation, Operation):
        return operation
    try:
        return Operation(operation)
    except ValueError as e:
        raise UnknownOperation("Unknown operation {!r}".format(operation)) from e


def _prefixed(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def canonical_params(operation: Operation, params: Mapping[str, str]) -> bytes:
    """Field-name sorted, length-prefixed encoding of the operation and params"""
    fields = dict(params)
    if "operation" in fields:
        raise GovernanceError("'operation' is reserved and cannot be a parameter")
    fields["operation"] = operation.value
    encoded = []
    for name in sorted(fields):
        value = fields[name]
        if not isinstance(value, str):
            raise GovernanceError(
                "Parameter {} must be a string, got {}".format(
                    name, type(value).__name__
                )
            )
        encoded.append(_prefixed(name.encode("utf-8")))
        encoded.append(_prefixed(value.encode("utf-8")))
    return b"".join(encoded)


def payload_digest(operation: Operation, params: Mapping[str, str]) -> Digest:
    return digest(canonical_params(operation, params))


def _lower_hex(value: str, size: int) -> bool:
    try:
        raw = bytes.fromhex(value)
    except (TypeError, ValueError):
        return False
    return len(raw) == size and raw.hex() == value


def check_params(operation: Operation, params: Mapping[str, str]) -> None:
    """Refuse a proposal whose parameters could never be applied"""
    missing = [name for name in REQUIRED_PARAMS[operation] if name not in params]
    if missing:
        raise InvalidParameters(
            "{} needs parameters: {}".format(operation.value, ", ".join(missing))
        )
    if "record_id" in REQUIRED_PARAMS[operation]:
        if not valid_identifier(params["record_id"]):
            raise InvalidParameters("record_id is not a valid identifier")
    if operation is Operation.EXTRACT_RECORD:
        if not _lower_hex(params["recipient"], 32):
            raise InvalidParameters("recipient must be a 32 byte lowercase hex key")
    elif operation is Operation.UPDATE_RECORD:
        if not _lower_hex(params["text_digest"], 32):
            raise InvalidParameters("text_digest must be a lowercase hex digest")
    elif operation is Operation.CHANGE_RULES:
        try:
            compile_rules(parse_rules(params["rules"]))
        except RedactionError as e:
            raise InvalidParameters("rules do not compile: {}".format(e)) from e
    elif operation is Operation.ROTATE_POLICY:
        try:
            GovernancePolicy.from_json(params["policy"])
        except GovernanceError as e:
            raise InvalidParameters(str(e)) from e


@attr.s(frozen=True, slots=True)
class Representative:
    rep_id: str = attr.ib()
    public_key: bytes = attr.ib(repr=lambda key: key.hex())


def _check_policy(instance, attribute, value):
    reps = instance.representatives
    if len({rep.rep_id for rep in reps}) != len(reps):
        raise GovernanceError("Representative ids must be unique")
    if not 1 <= value <= len(reps):
        raise GovernanceError(
            "Threshold {} must be between 1 and {}".format(value, len(reps))
        )


@attr.s(frozen=True, slots=True)
class GovernancePolicy:
    representatives: Tuple[Representative, ...] = attr.ib(converter=tuple)
    threshold: int = attr.ib(validator=_check_policy)

    def key_for(self, rep_id: str) -> bytes:
        for rep in self.representatives:
            if rep.rep_id == rep_id:
                return rep.public_key
        raise UnknownRepresentative(
            "{} is not a registered representative".format(rep_id)
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "threshold": self.threshold,
                "representatives": [
                    {"rep_id": rep.rep_id, "public_key": rep.public_key.hex()}
                    for rep in self.representatives
                ],
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str) -> "GovernancePolicy":
        try:
            data = json.loads(text)
            reps = [
                Representative(entry["rep_id"], bytes.fromhex(entry["public_key"]))
                for entry in data["representatives"]
            ]
            threshold = int(data["threshold"])
        except (KeyError, TypeError, ValueError) as e:
            raise GovernanceError("Malformed governance policy: {}".format(e)) from e
        for rep in reps:
            if not valid_identifier(rep.rep_id) or len(rep.public_key) != 32:
                raise GovernanceError(
                    "Malformed representative {!r}".format(rep.rep_id)
                )
        return cls(reps, threshold)


def load_policy(path: Union[str, Path]) -> GovernancePolicy:
    return GovernancePolicy.from_json(Path(path).read_text(encoding="utf-8"))


@attr.s(frozen=True, slots=True)
class AdminProposal:
    proposal_id: str = attr.ib()
    operation: Operation = attr.ib(converter=parse_operation)
    payload_digest: Digest = attr.ib()
    nonce: bytes = attr.ib(repr=lambda value: value.hex())
    created_seq: int = attr.ib()
    params: Dict[str, str] = attr.ib(factory=dict, eq=False, hash=False)

    def approval_message(self) -> bytes:
        return self.proposal_id.encode("ascii") + self.payload_digest.value + self.nonce

    def to_json(self) -> str:
        return json.dumps(
            {
                "proposal_id": self.proposal_id,
                "operation": self.operation.value,
                "payload_digest": self.payload_digest.hex(),
                "nonce": self.nonce.hex(),
                "created_seq": self.created_seq,
                "params": self.params,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "AdminProposal":
        try:
            data = json.loads(text)
            return cls(
                proposal_id=data["proposal_id"],
                operation=data["operation"],
                payload_digest=Digest.from_hex(data["payload_digest"]),
                nonce=bytes.fromhex(data["nonce"]),
                created_seq=int(data["created_seq"]),
                params=dict(data.get("params", {})),
            )
        except (KeyError, TypeError, ValueError, KeyFormatError) as e:
            raise GovernanceError("Malformed proposal: {}".format(e)) from e


@attr.s(frozen=True, slots=True)
class Approval:
    proposal_id: str = attr.ib()
    rep_id: str = attr.ib()
    signature: Signature = attr.ib()

    def to_json(self) -> str:
        return json.dumps(
            {
                "proposal_id": self.proposal_id,
                "rep_id": self.rep_id,
                "signature": self.signature.hex(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "Approval":
        try:
            data = json.loads(text)
            return cls(
                data["proposal_id"],
                data["rep_id"],
                Signature.from_hex(data["signature"]),
            )
        except (KeyError, TypeError, ValueError, KeyFormatError) as e:
            raise GovernanceError("Malformed approval: {}".format(e)) from e


@attr.s(frozen=True, slots=True)
class ExecutedProposal:
    """Enclave-signed token authorizing exactly one gated operation"""

    proposal_id: str = attr.ib()
    operation: Operation = attr.ib(converter=parse_operation)
    payload_digest: Digest = attr.ib()
    approvers: Tuple[str, ...] = attr.ib(converter=tuple)
    signature: Signature = attr.ib()

    def signed_bytes(self) -> bytes:
        return b"".join(
            (
                b"crag/executed/v1",
                _prefixed(self.proposal_id.encode("ascii")),
                _prefixed(self.operation.value.encode("ascii")),
                self.payload_digest.value,
                _prefixed(",".join(self.approvers).encode("utf-8")),
            )
        )

    def to_dict(self) -> dict:
        return {
            "proposal_id": self.proposal_id,
            "operation": self.operation.value,
            "payload_digest": self.payload_digest.hex(),
            "approvers": list(self.approvers),
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExecutedProposal":
        try:
            return cls(
                proposal_id=data["proposal_id"],
                operation=data["operation"],
                payload_digest=Digest.from_hex(data["payload_digest"]),
                approvers=data["approvers"],
                signature=Signature.from_hex(data["signature"]),
            )
        except (KeyError, TypeError, ValueError, KeyFormatError) as e:
            raise GovernanceError("Malformed execution token: {}".format(e)) from e


def approve(
    policy: GovernancePolicy, proposal: AdminProposal, rep_keys: KeyPair, rep_id: str
) -> Approval:
    """Representative side: co-sign (proposal_id ‖ payload_digest ‖ nonce)"""
    registered = policy.key_for(rep_id)
    if rep_keys.public_key != registered:
        raise InvalidApproval(
            "Key does not match the one registered for {}".format(rep_id)
        )
    signature = sign(rep_keys, proposal.approval_message())
    return Approval(proposal.proposal_id, rep_id, signature)


def sign_proposal_request(
    rep_keys: KeyPair, operation: Operation, params: Mapping[str, str]
) -> Signature:
    return sign(rep_keys, canonical_params(operation, params))


class ProposalRow(Base):
    __tablename__ = "proposals"
    __mapper_args__ = {"eager_defaults": True}
    proposal_id = Column("proposal_id", String(64), primary_key=True)
    operation = Column("operation", String(32), nullable=False)
    payload_digest = Column("payload_digest", String(64), nullable=False)
    nonce = Column("nonce", String(32), nullable=False)
    params = Column("params", Text, nullable=False)
    created_seq = Column("created_seq", Integer, nullable=False)
    executed = Column("executed", Boolean, nullable=False, default=False)
    redeemed = Column("redeemed", Boolean, nullable=False, default=False)

    def __init__(self, proposal: AdminProposal):
        self.proposal_id = proposal.proposal_id
        self.operation = proposal.operation.value
        self.payload_digest = proposal.payload_digest.hex()
        self.nonce = proposal.nonce.hex()
        self.params = json.dumps(proposal.params, sort_keys=True)
        self.created_seq = proposal.created_seq
        self.executed = False
        self.redeemed = False

    def to_proposal(self) -> AdminProposal:
        return AdminProposal(
            proposal_id=self.proposal_id,
            operation=self.operation,
            payload_digest=Digest.from_hex(self.payload_digest),
            nonce=bytes.fromhex(self.nonce),
            created_seq=self.created_seq,
            params=json.loads(self.params),
        )


class ApprovalRow(Base):
    __tablename__ = "approvals"
    __mapper_args__ = {"eager_defaults": True}
    proposal_id = Column(
        "proposal_id",
        String(64),
        ForeignKey("proposals.proposal_id", ondelete="CASCADE"),
        primary_key=True,
    )
    rep_id = Column("rep_id", String(64), primary_key=True)
    signature = Column("signature", String(128), nullable=False)

    def __init__(self, approval: Approval):
        self.proposal_id = approval.proposal_id
        self.rep_id = approval.rep_id
        self.signature = approval.signature.hex()

    def to_approval(self) -> Approval:
        return Approval(
            self.proposal_id, self.rep_id, Signature.from_hex(self.signature)
        )


class Governance:
    """Proposal ledger and threshold check; all state changes take one lock"""

    def __init__(
        self, policy: GovernancePolicy, session_factory, enclave, audit: AuditLog
    ):
        self._policy = policy
        self._session = session_factory
        self._enclave = enclave
        self._audit = audit
        self._lock = threading.Lock()

    @property
    def policy(self) -> GovernancePolicy:
        return self._policy

    def verify_proposer(
        self,
        rep_id: str,
        signature: Signature,
        operation: Union[str, Operation],
        params: Mapping[str, str],
    ) -> None:
        operation = parse_operation(operation)
        key = self._policy.key_for(rep_id)
        if not verify(key, canonical_params(operation, params), signature):
            raise InvalidApproval("Proposal request is not signed by {}".format(rep_id))

    def propose(
        self,
        operation: Union[str, Operation],
        params: Mapping[str, str],
        proposer: str = "governance",
    ) -> AdminProposal:
        operation = parse_operation(operation)
        params = dict(params)
        payload = payload_digest(operation, params)
        check_params(operation, params)
        with self._lock, self._session() as session:
            with session.begin():
                last = session.execute(
                    select(func.max(ProposalRow.created_seq))
                ).scalar()
                proposal = AdminProposal(
                    proposal_id=uuid.uuid4().hex,
                    operation=operation,
                    payload_digest=payload,
                    nonce=os.urandom(NONCE_BYTES),
                    created_seq=(last or 0) + 1,
                    params=params,
                )
                session.add(ProposalRow(proposal))
            self._audit.append_event(EventKind.PROPOSAL, proposer, [payload])
        logger.info(
            "Proposal {} for {} by {}".format(
                proposal.proposal_id, operation.value, proposer
            )
        )
        return proposal

    def get(self, proposal_id: str) -> AdminProposal:
        with self._session() as session:
            row = session.get(ProposalRow, proposal_id)
            if row is None:
                raise ProposalNotFound("No proposal {}".format(proposal_id))
            return row.to_proposal()

    def pending(self) -> List[AdminProposal]:
        with self._session() as session:
            rows = session.execute(
                select(ProposalRow)
                .where(ProposalRow.executed.is_(False))
                .order_by(ProposalRow.created_seq)
            ).scalars()
            return [row.to_proposal() for row in rows]

    def approvals_for(self, proposal_id: str) -> List[Approval]:
        with self._session() as session:
            rows = session.execute(
                select(ApprovalRow).where(ApprovalRow.proposal_id == proposal_id)
            ).scalars()
            return [row.to_approval() for row in rows]

    def _is_valid(self, proposal: AdminProposal, approval: Approval) -> bool:
        if approval.proposal_id != proposal.proposal_id:
            return False
        try:
            key = self._policy.key_for(approval.rep_id)
        except UnknownRepresentative:
            return False
        return verify(key, proposal.approval_message(), approval.signature)

    def record_approval(self, approval: Approval) -> Approval:
        with self._lock, self._session() as session:
            with session.begin():
                row = session.get(ProposalRow, approval.proposal_id)
                if row is None:
                    raise ProposalNotFound(
                        "No proposal {}".format(approval.proposal_id)
                    )
                if row.executed:
                    raise AlreadyExecuted(
                        "Proposal {} already executed".format(approval.proposal_id)
                    )
                proposal = row.to_proposal()
                self._policy.key_for(approval.rep_id)
                if not self._is_valid(proposal, approval):
                    raise InvalidApproval(
                        "Approval by {} does not verify".format(approval.rep_id)
                    )
                if session.get(ApprovalRow, (approval.proposal_id, approval.rep_id)):
                    raise DuplicateApproval(
                        "{} already approved {}".format(
                            approval.rep_id, approval.proposal_id
                        )
                    )
                session.add(ApprovalRow(approval))
            self._audit.append_event(
                EventKind.APPROVAL, approval.rep_id, [proposal.payload_digest]
            )
        logger.info(
            "Approval by {} for proposal {}".format(
                approval.rep_id, approval.proposal_id
            )
        )
        return approval

    def execute(
        self, proposal_id: str, approvals: Iterable[Approval] = ()
    ) -> ExecutedProposal:
        with self._lock, self._session() as session:
            with session.begin():
                row = session.get(ProposalRow, proposal_id)
                if row is None:
                    raise ProposalNotFound("No proposal {}".format(proposal_id))
                if row.executed:
                    raise AlreadyExecuted(
                        "Proposal {} already executed".format(proposal_id)
                    )
                proposal = row.to_proposal()
                stored = session.execute(
                    select(ApprovalRow).where(ApprovalRow.proposal_id == proposal_id)
                ).scalars()
                valid: Dict[str, Approval] = {}
                for approval in [r.to_approval() for r in stored] + list(approvals):
                    if self._is_valid(proposal, approval):
                        valid.setdefault(approval.rep_id, approval)
                    else:
                        logger.warning(
                            "Ignoring invalid approval by {} for {}".format(
                                approval.rep_id, proposal_id
                            )
                        )
                if len(valid) < self._policy.threshold:
                    raise InsufficientApprovals(
                        proposal_id, len(valid), self._policy.threshold
                    )
                row.executed = True
                unsigned = ExecutedProposal(
                    proposal_id=proposal_id,
                    operation=proposal.operation,
                    payload_digest=proposal.payload_digest,
                    approvers=sorted(valid),
                    signature=Signature(bytes(64)),
                )
                token = attr.evolve(
                    unsigned, signature=self._enclave.sign(unsigned.signed_bytes())
                )
            self._audit.append_event(
                EventKind.EXECUTION, "governance", [proposal.payload_digest]
            )
        logger.info(
            "Executed proposal {} ({}) with approvals from {}".format(
                proposal_id, proposal.operation.value, ", ".join(token.approvers)
            )
        )
        return token

    def redeem(
        self,
        token: Optional[ExecutedProposal],
        operation: Operation,
        params: Mapping[str, str],
    ) -> AdminProposal:
        """Consume a token for exactly the operation and params it was issued for"""
        if not isinstance(token, ExecutedProposal):
            raise TokenRejected("{} needs an executed proposal".format(operation.value))
        if not verify(
            self._enclave.signing_public, token.signed_bytes(), token.signature
        ):
            raise TokenRejected("Token was not issued by this enclave")
        if token.operation is not operation:
            raise TokenRejected(
                "Token authorizes {}, not {}".format(
                    token.operation.value, operation.value
                )
            )
        if token.payload_digest != payload_digest(operation, params):
            raise TokenRejected("Token was issued for different parameters")
        with self._lock, self._session() as session:
            with session.begin():
                row = session.get(ProposalRow, token.proposal_id)
                if row is None or not row.executed:
                    raise TokenRejected(
                        "Proposal {} was never executed".format(token.proposal_id)
                    )
                if row.redeemed:
                    raise TokenRejected(
                        "Token for {} already used".format(token.proposal_id)
                    )
                row.redeemed = True
                return row.to_proposal()

    def rotate_policy(self, token: ExecutedProposal, policy: GovernancePolicy) -> None:
        self.redeem(token, Operation.ROTATE_POLICY, {"policy": policy.to_json()})
        self._policy = policy
        logger.warning(
            "Governance policy rotated: {} representatives, threshold {}".format(
                len(policy.representatives), policy.threshold
            )
        )
