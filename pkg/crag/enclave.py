# Software emulation of a trusted execution environment
#
# The boundary is a module contract rather than memory encryption:
# plaintext derived from private records or user queries may only exist
# while an `exec` call is running, and whatever `exec` returns passes
# through the registered egress monitors on the way out.

import contextlib
import contextvars
import enum
import functools
import logging
import os
from typing import Any, Callable, List, Optional

import attr

from .crypto import (
    DIGEST_SIZE,
    KEY_SIZE,
    NONCE_SIZE,
    AuthenticationError,
    Digest,
    KeyKind,
    KeyPair,
    Signature,
    aead_decrypt,
    aead_encrypt,
    derive_key,
    digest,
    generate_keypair,
    sign,
    verify,
)

logger = logging.getLogger(__name__)

AGREEMENT_INFO = b"crag/enclave/agreement/v1"
SIGNING_INFO = b"crag/enclave/signing/v1"
SEAL_INFO = b"crag/seal/v1"

_depth: contextvars.ContextVar = contextvars.ContextVar("enclave_depth", default=0)
_resident = set()


class EnclaveError(Exception):
    pass


class BoundaryViolation(EnclaveError):
    """Sensitive plaintext crossed, or tried to cross, the enclave boundary"""


class SealingError(EnclaveError, AuthenticationError):
    pass


@attr.s(frozen=True, slots=True, repr=False)
class Measurement(Digest):
    """Digest over code identity ‖ canonical configuration bytes"""

    @classmethod
    def of(cls, code_identity: bytes, config: bytes) -> "Measurement":
        return cls(digest(code_identity + config).value)

    def __repr__(self) -> str:
        return "Measurement({}…)".format(self.value[:6].hex())


@attr.s(frozen=True, slots=True)
class AttestationReport:
    measurement: Measurement = attr.ib()
    report_data: Digest = attr.ib()
    enclave_signing_public: bytes = attr.ib(repr=lambda key: key.hex())
    root_signature: Signature = attr.ib()

    SIZE = 2 * DIGEST_SIZE + KEY_SIZE + 64

    def signed_bytes(self) -> bytes:
        return (
            self.measurement.value
            + self.report_data.value
            + self.enclave_signing_public
        )

    def to_bytes(self) -> bytes:
        return self.signed_bytes() + self.root_signature.value

    @classmethod
    def from_bytes(cls, data: bytes) -> "AttestationReport":
        if len(data) != cls.SIZE:
            raise EnclaveError(
                "Attestation report must be {} bytes, got {}".format(
                    cls.SIZE, len(data)
                )
            )
        return cls(
            measurement=Measurement(data[:32]),
            report_data=Digest(data[32:64]),
            enclave_signing_public=data[64:96],
            root_signature=Signature(data[96:]),
        )

    def hex(self) -> str:
        return self.to_bytes().hex()

    @classmethod
    def from_hex(cls, text: str) -> "AttestationReport":
        try:
            return cls.from_bytes(bytes.fromhex(text))
        except ValueError as e:
            raise EnclaveError("Attestation report is not valid hex") from e


class RejectReason(enum.Enum):
    BAD_ROOT_SIGNATURE = "bad-root-signature"
    MEASUREMENT_MISMATCH = "measurement-mismatch"


@attr.s(frozen=True, slots=True)
class ReportVerdict:
    accepted: bool = attr.ib()
    reason: Optional[RejectReason] = attr.ib(default=None)

    def __bool__(self) -> bool:
        return self.accepted


@attr.s(frozen=True, slots=True)
class SealedBlob:
    nonce: bytes = attr.ib()
    ciphertext: bytes = attr.ib(repr=lambda value: "<{} bytes>".format(len(value)))
    tag: bytes = attr.ib()
    sealed_by: Measurement = attr.ib()

    def to_bytes(self) -> bytes:
        return self.sealed_by.value + self.nonce + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedBlob":
        if len(data) < DIGEST_SIZE + NONCE_SIZE + 16:
            raise SealingError("Sealed blob is truncated")
        return cls(
            nonce=data[DIGEST_SIZE : DIGEST_SIZE + NONCE_SIZE],
            ciphertext=data[DIGEST_SIZE + NONCE_SIZE : -16],
            tag=data[-16:],
            sealed_by=Measurement(data[:DIGEST_SIZE]),
        )


def enclave_resident(func: Callable) -> Callable:
    """Mark a function as logic that may run inside `EnclaveIdentity.exec`"""
    _resident.add(func)
    return func


def inside_enclave() -> bool:
    return _depth.get() > 0


def require_enclave() -> None:
    if not inside_enclave():
        raise BoundaryViolation("Enclave-only logic called outside an exec extent")


@attr.s(frozen=True, repr=False, eq=False)
class EnclaveIdentity:
    measurement: Measurement = attr.ib()
    _device_secret: bytes = attr.ib()
    agreement_keys: KeyPair = attr.ib()
    signing_keys: KeyPair = attr.ib()
    _egress_monitors: List[Callable[[Any], None]] = attr.ib(factory=list)

    def __repr__(self) -> str:
        return "EnclaveIdentity(measurement={})".format(self.measurement.hex())

    @property
    def pk_tee(self) -> bytes:
        return self.agreement_keys.public_key

    @property
    def signing_public(self) -> bytes:
        return self.signing_keys.public_key

    def sign(self, message: bytes) -> Signature:
        return sign(self.signing_keys, message)

    def add_egress_monitor(self, monitor: Callable[[Any], None]) -> None:
        """Monitors see every value returned across the boundary and may raise"""
        self._egress_monitors.append(monitor)

    def remove_egress_monitor(self, monitor: Callable[[Any], None]) -> None:
        self._egress_monitors.remove(monitor)

    def exec(self, operation: Callable, *args, **kwargs):
        if getattr(operation, "__func__", operation) not in _resident:
            raise EnclaveError(
                "{} is not registered enclave logic".format(
                    getattr(operation, "__qualname__", operation)
                )
            )
        token = _depth.set(_depth.get() + 1)
        try:
            result = operation(*args, **kwargs)
        finally:
            _depth.reset(token)
        if not inside_enclave():
            for monitor in self._egress_monitors:
                monitor(result)
        return result

    def _seal_key(self) -> bytes:
        return derive_key(self._device_secret, self.measurement.value, SEAL_INFO)

    def seal(self, plaintext: bytes) -> SealedBlob:
        sealed = aead_encrypt(self._seal_key(), plaintext, self.measurement.value)
        return SealedBlob(
            nonce=sealed[:NONCE_SIZE],
            ciphertext=sealed[NONCE_SIZE:-16],
            tag=sealed[-16:],
            sealed_by=self.measurement,
        )

    def unseal(self, blob: SealedBlob) -> bytes:
        try:
            return aead_decrypt(
                self._seal_key(),
                blob.nonce + blob.ciphertext + blob.tag,
                self.measurement.value,
            )
        except AuthenticationError as e:
            raise SealingError("Blob was not sealed by this enclave identity") from e

    def attest(self, report_data: Digest, root_keys: KeyPair) -> AttestationReport:
        return attest(self, report_data, root_keys)


def boot_enclave(
    code_identity: bytes, config: bytes, device_secret: bytes
) -> EnclaveIdentity:
    if not code_identity:
        raise EnclaveError("Code identity must not be empty")
    if not config:
        raise EnclaveError("Enclave configuration must not be empty")
    if not isinstance(device_secret, bytes) or len(device_secret) != KEY_SIZE:
        raise EnclaveError("Device secret must be exactly {} bytes".format(KEY_SIZE))
    measurement = Measurement.of(code_identity, config)
    agreement_seed = derive_key(device_secret, measurement.value, AGREEMENT_INFO)
    signing_seed = derive_key(device_secret, measurement.value, SIGNING_INFO)
    enclave = EnclaveIdentity(
        measurement=measurement,
        device_secret=device_secret,
        agreement_keys=generate_keypair(KeyKind.AGREEMENT, agreement_seed),
        signing_keys=generate_keypair(KeyKind.SIGNING, signing_seed),
    )
    logger.info("Enclave booted with measurement {}".format(measurement.hex()))
    return enclave


def attest(
    enclave: EnclaveIdentity, report_data: Digest, root_keys: KeyPair
) -> AttestationReport:
    unsigned = AttestationReport(
        measurement=enclave.measurement,
        report_data=report_data,
        enclave_signing_public=enclave.signing_public,
        root_signature=Signature(bytes(64)),
    )
    return attr.evolve(
        unsigned, root_signature=sign(root_keys, unsigned.signed_bytes())
    )


def verify_report(
    root_public: bytes, report: AttestationReport, expected: Digest
) -> ReportVerdict:
    if not verify(root_public, report.signed_bytes(), report.root_signature):
        return ReportVerdict(False, RejectReason.BAD_ROOT_SIGNATURE)
    if report.measurement.value != expected.value:
        return ReportVerdict(False, RejectReason.MEASUREMENT_MISMATCH)
    return ReportVerdict(True)


@attr.s(frozen=True, repr=False)
class Platform:
    """The hardware vendor and device stand-in: a root key plus a device secret"""

    root_keys: KeyPair = attr.ib()
    device_secret: bytes = attr.ib()

    def __repr__(self) -> str:
        return "Platform(root={})".format(self.root_keys.public_key.hex())

    @property
    def root_public(self) -> bytes:
        return self.root_keys.public_key

    @classmethod
    def generate(cls) -> "Platform":
        return cls(generate_keypair(KeyKind.SIGNING), os.urandom(KEY_SIZE))

    def boot(self, code_identity: bytes, config: bytes) -> EnclaveIdentity:
        return boot_enclave(code_identity, config, self.device_secret)

    def attest(self, enclave: EnclaveIdentity, report_data: Digest):
        return attest(enclave, report_data, self.root_keys)


@contextlib.contextmanager
def egress_monitor(enclave: EnclaveIdentity, monitor: Callable[[Any], None]):
    enclave.add_egress_monitor(monitor)
    try:
        yield monitor
    finally:
        enclave.remove_egress_monitor(monitor)


def resident_method(method: Callable) -> Callable:
    """Register a method and refuse calls made outside an exec extent"""

    @functools.wraps(method)
    def guarded(*args, **kwargs):
        require_enclave()
        return method(*args, **kwargs)

    _resident.add(guarded)
    return guarded
