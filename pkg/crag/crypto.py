# Cryptographic primitives shared by every other module
# Suite: SHA-256, Ed25519, X25519 + HKDF-SHA256 + AES-256-GCM

import enum
import hashlib
import logging
import os
import struct
from typing import Optional, Union

import attr
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

logger = logging.getLogger(__name__)

DIGEST_SIZE = 32
KEY_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16
SIGNATURE_SIZE = 64

HYBRID_INFO = b"crag/hybrid/v1"
WRAP_AAD = b"crag/wrap/v1"

_RAW = serialization.Encoding.Raw
_RAW_PUBLIC = serialization.PublicFormat.Raw
_RAW_PRIVATE = serialization.PrivateFormat.Raw


class CryptoError(Exception):
    pass


class AuthenticationError(CryptoError):
    """Ciphertext, tag, aad or key did not authenticate"""


class KeyFormatError(CryptoError):
    """Key, seed or signature bytes have the wrong shape"""


def _exact_length(size: int):
    def check(instance, attribute, value):
        if not isinstance(value, bytes) or len(value) != size:
            raise KeyFormatError(
                "{} must be exactly {} bytes".format(attribute.name, size)
            )

    return check


@attr.s(frozen=True, slots=True, repr=False)
class Digest:
    value: bytes = attr.ib(validator=_exact_length(DIGEST_SIZE))

    def hex(self) -> str:
        return self.value.hex()

    @classmethod
    def from_hex(cls, text: str) -> "Digest":
        try:
            return cls(bytes.fromhex(text))
        except ValueError as e:
            raise KeyFormatError("Digest is not valid hex") from e

    @classmethod
    def zero(cls) -> "Digest":
        return cls(bytes(DIGEST_SIZE))

    def __bytes__(self) -> bytes:
        return self.value

    def __repr__(self) -> str:
        return "Digest({}…)".format(self.value[:6].hex())


def digest(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).digest())


def derive_key(
    ikm: bytes, salt: Optional[bytes], info: bytes, length: int = KEY_SIZE
) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(), length=length, salt=salt, info=info
    ).derive(ikm)


class KeyKind(enum.Enum):
    SIGNING = "signing"
    AGREEMENT = "agreement"


@attr.s(frozen=True, slots=True, repr=False)
class Signature:
    value: bytes = attr.ib(validator=_exact_length(SIGNATURE_SIZE))

    def hex(self) -> str:
        return self.value.hex()

    @classmethod
    def from_hex(cls, text: str) -> "Signature":
        try:
            return cls(bytes.fromhex(text))
        except ValueError as e:
            raise KeyFormatError("Signature is not valid hex") from e

    def __repr__(self) -> str:
        return "Signature({}…)".format(self.value[:6].hex())


@attr.s(frozen=True, slots=True, repr=False)
class KeyPair:
    kind: KeyKind = attr.ib(validator=attr.validators.instance_of(KeyKind))
    public_key: bytes = attr.ib(validator=_exact_length(KEY_SIZE))
    _secret_key: bytes = attr.ib(validator=_exact_length(KEY_SIZE), eq=False)

    def __repr__(self) -> str:
        return "KeyPair(kind={}, public={})".format(
            self.kind.value, self.public_key.hex()
        )

    def _private(self) -> Union[Ed25519PrivateKey, X25519PrivateKey]:
        if self.kind is KeyKind.SIGNING:
            return Ed25519PrivateKey.from_private_bytes(self._secret_key)
        return X25519PrivateKey.from_private_bytes(self._secret_key)

    def export_secret(self) -> bytes:
        # Only the operator keygen command and crag.testing call this
        return self._secret_key


def generate_keypair(kind: KeyKind, seed: Optional[bytes] = None) -> KeyPair:
    if seed is not None and (not isinstance(seed, bytes) or len(seed) != KEY_SIZE):
        raise KeyFormatError("Seed must be exactly {} bytes".format(KEY_SIZE))
    secret = seed if seed is not None else os.urandom(KEY_SIZE)
    if kind is KeyKind.SIGNING:
        private = Ed25519PrivateKey.from_private_bytes(secret)
    else:
        private = X25519PrivateKey.from_private_bytes(secret)
    public = private.public_key().public_bytes(_RAW, _RAW_PUBLIC)
    return KeyPair(kind, public, private.private_bytes(
        _RAW, _RAW_PRIVATE, serialization.NoEncryption()
    ))


def keypair_from_secret(kind: KeyKind, secret: bytes) -> KeyPair:
    """Rebuild a keypair from secret bytes written by `crag keygen`"""
    return generate_keypair(kind, seed=secret)


@attr.s(frozen=True, slots=True)
class EnvelopeCiphertext:
    ephemeral_public: bytes = attr.ib(validator=_exact_length(KEY_SIZE))
    nonce: bytes = attr.ib(validator=_exact_length(NONCE_SIZE))
    ciphertext: bytes = attr.ib(repr=lambda value: "<{} bytes>".format(len(value)))
    tag: bytes = attr.ib(validator=_exact_length(TAG_SIZE))
    aad_digest: Digest = attr.ib(validator=attr.validators.instance_of(Digest))

    def to_bytes(self) -> bytes:
        # ephemeral_public ‖ nonce ‖ aad_digest ‖ u32 len ‖ ciphertext ‖ tag
        return b"".join(
            (
                self.ephemeral_public,
                self.nonce,
                self.aad_digest.value,
                struct.pack(">I", len(self.ciphertext)),
                self.ciphertext,
                self.tag,
            )
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "EnvelopeCiphertext":
        header = KEY_SIZE + NONCE_SIZE + DIGEST_SIZE
        if len(data) < header + 4 + TAG_SIZE:
            raise KeyFormatError("Envelope is truncated")
        (length,) = struct.unpack(">I", data[header : header + 4])
        if len(data) != header + 4 + length + TAG_SIZE:
            raise KeyFormatError("Envelope length prefix does not match payload")
        body = data[header + 4 :]
        return cls(
            ephemeral_public=data[:KEY_SIZE],
            nonce=data[KEY_SIZE : KEY_SIZE + NONCE_SIZE],
            ciphertext=body[:length],
            tag=body[length:],
            aad_digest=Digest(data[KEY_SIZE + NONCE_SIZE : header]),
        )

    def hex(self) -> str:
        return self.to_bytes().hex()

    @classmethod
    def from_hex(cls, text: str) -> "EnvelopeCiphertext":
        try:
            return cls.from_bytes(bytes.fromhex(text))
        except ValueError as e:
            raise KeyFormatError("Envelope is not valid hex") from e


def _hybrid_key(shared: bytes, ephemeral_public: bytes, recipient_public: bytes):
    return derive_key(shared, ephemeral_public + recipient_public, HYBRID_INFO)


def hybrid_encrypt(
    recipient: bytes, plaintext: bytes, aad: bytes = b""
) -> EnvelopeCiphertext:
    if not isinstance(recipient, bytes) or len(recipient) != KEY_SIZE:
        raise KeyFormatError("Recipient must be a 32 byte X25519 public key")
    try:
        recipient_key = X25519PublicKey.from_public_bytes(recipient)
        ephemeral = X25519PrivateKey.generate()
        shared = ephemeral.exchange(recipient_key)
    except ValueError as e:
        raise KeyFormatError("Recipient is not a usable X25519 key") from e
    ephemeral_public = ephemeral.public_key().public_bytes(_RAW, _RAW_PUBLIC)
    nonce = os.urandom(NONCE_SIZE)
    sealed = AESGCM(_hybrid_key(shared, ephemeral_public, recipient)).encrypt(
        nonce, plaintext, aad
    )
    return EnvelopeCiphertext(
        ephemeral_public=ephemeral_public,
        nonce=nonce,
        ciphertext=sealed[:-TAG_SIZE],
        tag=sealed[-TAG_SIZE:],
        aad_digest=digest(aad),
    )


def hybrid_decrypt(
    recipient_secret: KeyPair, envelope: EnvelopeCiphertext, aad: bytes = b""
) -> bytes:
    if recipient_secret.kind is not KeyKind.AGREEMENT:
        raise KeyFormatError("Hybrid decryption needs an agreement keypair")
    if digest(aad) != envelope.aad_digest:
        raise AuthenticationError("Associated data does not match envelope")
    try:
        peer = X25519PublicKey.from_public_bytes(envelope.ephemeral_public)
        shared = recipient_secret._private().exchange(peer)
        key = _hybrid_key(
            shared, envelope.ephemeral_public, recipient_secret.public_key
        )
        return AESGCM(key).decrypt(
            envelope.nonce, envelope.ciphertext + envelope.tag, aad
        )
    except (InvalidTag, ValueError) as e:
        raise AuthenticationError("Envelope failed to authenticate") from e


@attr.s(frozen=True, slots=True, repr=False)
class WrappedKey:
    nonce: bytes = attr.ib(validator=_exact_length(NONCE_SIZE))
    wrapped: bytes = attr.ib(validator=_exact_length(KEY_SIZE + TAG_SIZE))

    SIZE = NONCE_SIZE + KEY_SIZE + TAG_SIZE

    def to_bytes(self) -> bytes:
        return self.nonce + self.wrapped

    @classmethod
    def from_bytes(cls, data: bytes) -> "WrappedKey":
        return cls(data[:NONCE_SIZE], data[NONCE_SIZE:])

    def __repr__(self) -> str:
        return "WrappedKey(nonce={})".format(self.nonce.hex())


def _check_key(key: bytes, name: str) -> None:
    if not isinstance(key, bytes) or len(key) != KEY_SIZE:
        raise KeyFormatError("{} must be exactly {} bytes".format(name, KEY_SIZE))


def wrap_data_key(master: bytes, data_key: bytes) -> WrappedKey:
    _check_key(master, "Master key")
    _check_key(data_key, "Data key")
    nonce = os.urandom(NONCE_SIZE)
    return WrappedKey(nonce, AESGCM(master).encrypt(nonce, data_key, WRAP_AAD))


def unwrap_data_key(master: bytes, wrapped: WrappedKey) -> bytes:
    _check_key(master, "Master key")
    try:
        return AESGCM(master).decrypt(wrapped.nonce, wrapped.wrapped, WRAP_AAD)
    except InvalidTag as e:
        raise AuthenticationError("Data key failed to unwrap") from e


def sign(secret: KeyPair, message: bytes) -> Signature:
    if secret.kind is not KeyKind.SIGNING:
        raise KeyFormatError("Signing needs an Ed25519 keypair")
    return Signature(secret._private().sign(message))


def verify(
    public: bytes, message: bytes, signature: Union[Signature, bytes]
) -> bool:
    if not isinstance(signature, Signature):
        signature = Signature(signature)
    if not isinstance(public, bytes) or len(public) != KEY_SIZE:
        raise KeyFormatError("Verification key must be 32 bytes")
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(signature.value, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def aead_encrypt(key: bytes, plaintext: bytes, aad: bytes) -> bytes:
    """AES-256-GCM with a fresh nonce, returned as nonce ‖ ciphertext ‖ tag"""
    nonce = os.urandom(NONCE_SIZE)
    return nonce + AESGCM(key).encrypt(nonce, plaintext, aad)


def aead_decrypt(key: bytes, sealed: bytes, aad: bytes) -> bytes:
    try:
        return AESGCM(key).decrypt(sealed[:NONCE_SIZE], sealed[NONCE_SIZE:], aad)
    except (InvalidTag, ValueError) as e:
        raise AuthenticationError("Ciphertext failed to authenticate") from e
