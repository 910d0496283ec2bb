"""Hashing, deterministic signatures, identity certificates and a signature-based VRF.

SHA-256 is the only hash.  Signatures are Ed25519, which is deterministic:
the same key and message always produce the same 64 bytes.  The VRF output
is ``proof = sign(sk, b"VRF" + x)`` and ``hash = SHA-256(proof)``; uniqueness
of the proof rests on that determinism.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from . import codec

DIGEST_SIZE = 32
SECRET_SIZE = 32
PUBLIC_SIZE = 32
SIGNATURE_SIZE = 64
ZERO_DIGEST = bytes(DIGEST_SIZE)
VRF_PREFIX = b"VRF"


class CryptoError(ValueError):
    """Malformed key material or other misuse of a primitive."""


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def sha256_int(digest: bytes) -> int:
    return int.from_bytes(digest, "big")


@lru_cache(maxsize=4096)
def _private_key(secret: bytes) -> Ed25519PrivateKey:
    if not isinstance(secret, (bytes, bytearray)) or len(secret) != SECRET_SIZE:
        raise CryptoError(f"signing secret must be {SECRET_SIZE} bytes")
    return Ed25519PrivateKey.from_private_bytes(bytes(secret))


@lru_cache(maxsize=4096)
def _public_key(public: bytes) -> Ed25519PublicKey:
    if not isinstance(public, (bytes, bytearray)) or len(public) != PUBLIC_SIZE:
        raise CryptoError(f"public key must be {PUBLIC_SIZE} bytes")
    try:
        return Ed25519PublicKey.from_public_bytes(bytes(public))
    except ValueError as exc:
        raise CryptoError(f"invalid public key: {exc}") from None


@dataclass(frozen=True)
class KeyPair:
    secret: bytes = field(repr=False)
    public: bytes

    @classmethod
    def from_seed(cls, seed: bytes) -> "KeyPair":
        pub = _private_key(seed).public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return cls(secret=bytes(seed), public=pub)

    @property
    def label(self) -> bytes:
        return sha256(self.public)


def derive_seed(*parts: Union[bytes, str, int]) -> bytes:
    """Domain-separated SHA-256 expansion used for every deterministic key."""
    enc = []
    for p in parts:
        if isinstance(p, str):
            enc.append(p.encode())
        elif isinstance(p, int):
            enc.append(codec.u64(p))
        else:
            enc.append(bytes(p))
    return sha256(codec.encode(*enc))


def sign(secret: bytes, message: bytes) -> bytes:
    return _private_key(secret).sign(message)


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    _public_key(public)  # raises CryptoError on a malformed key
    if len(signature) != SIGNATURE_SIZE:
        return False
    return _verify_cached(bytes(public), bytes(message), bytes(signature))


@lru_cache(maxsize=1 << 16)
def _verify_cached(public: bytes, message: bytes, signature: bytes) -> bool:
    # Verification is a pure function of its inputs; simulated nodes re-check
    # the same block many times, so results are memoised like a signature cache.
    try:
        _public_key(public).verify(signature, message)
    except InvalidSignature:
        return False
    return True


@dataclass(frozen=True)
class Certificate:
    """Identity certificate binding a subject key to an issuer."""

    subject_public_key: bytes
    subject_label: bytes
    issuer_id: bytes
    issuer_signature: bytes

    def signed_payload(self) -> bytes:
        return codec.encode(self.subject_public_key, self.subject_label, self.issuer_id)

    def encode(self) -> bytes:
        return codec.encode(self.subject_public_key, self.subject_label,
                            self.issuer_id, self.issuer_signature)

    @classmethod
    def decode(cls, data: bytes) -> "Certificate":
        pk, label, issuer, sig = codec.decode(data, 4)
        return cls(codec.fixed(pk, PUBLIC_SIZE, "subject key"),
                   codec.fixed(label, DIGEST_SIZE, "subject label"),
                   codec.fixed(issuer, DIGEST_SIZE, "issuer id"),
                   codec.fixed(sig, SIGNATURE_SIZE, "issuer signature"))


TrustedRoots = Mapping[bytes, bytes]


def issue_certificate(issuer_secret: bytes, issuer_id: bytes, subject_public_key: bytes) -> Certificate:
    unsigned = Certificate(subject_public_key, sha256(subject_public_key), issuer_id, b"")
    return Certificate(subject_public_key, unsigned.subject_label, issuer_id,
                       sign(issuer_secret, unsigned.signed_payload()))


def verify_certificate(cert: Certificate,
                       trusted_roots: Union[TrustedRoots, Iterable[tuple[bytes, bytes]]]) -> bool:
    issuer_key = dict(trusted_roots).get(cert.issuer_id)
    if issuer_key is None:
        return False
    if cert.subject_label != sha256(cert.subject_public_key):
        return False
    try:
        return verify(issuer_key, cert.signed_payload(), cert.issuer_signature)
    except CryptoError:
        return False


@dataclass(frozen=True)
class VrfOutput:
    hash: bytes
    proof: bytes

    def encode(self) -> bytes:
        return codec.encode(self.hash, self.proof)

    @classmethod
    def decode(cls, data: bytes) -> "VrfOutput":
        h, proof = codec.decode(data, 2)
        return cls(codec.fixed(h, DIGEST_SIZE, "vrf hash"),
                   codec.fixed(proof, SIGNATURE_SIZE, "vrf proof"))

    def as_int(self) -> int:
        return sha256_int(self.hash)


def vrf_prove(secret: bytes, x: bytes) -> VrfOutput:
    proof = sign(secret, VRF_PREFIX + x)
    return VrfOutput(sha256(proof), proof)


def vrf_verify(public: bytes, x: bytes, out: VrfOutput) -> bool:
    if out.hash != sha256(out.proof):
        return False
    return verify(public, VRF_PREFIX + x, out.proof)
