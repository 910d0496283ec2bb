"""Functional software emulation of a discrete TPM.

One :class:`Tpm` per trusted node.  It holds an endorsement seed, an
attestation key, a storage key and a seeded random stream, none of which are
ever returned to callers.  PCRs change only through :meth:`Tpm.pcr_extend`.

Quotes are signed over ``MAGIC || encode(selection, composite, qualifying)``.
Because the raw magic leads the signed bytes, :meth:`Tpm.sign_external`
refusing magic-prefixed input is enough to stop anyone from minting a quote
through the general-purpose signing path.
"""

from __future__ import annotations

import hmac
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import codec
from .crypto import (
    DIGEST_SIZE,
    SIGNATURE_SIZE,
    ZERO_DIGEST,
    KeyPair,
    VrfOutput,
    derive_seed,
    sha256,
    sign,
    verify,
    vrf_prove,
)

log = logging.getLogger(__name__)

MAGIC = b"\xff\x54\x43\x47"  # TPM_GENERATED_VALUE
NUM_PCRS = 24
CONSENSUS_PCRS = (0, 1, 2)
QUALIFYING_SIZE = 32
NONCE_SIZE = 16
TAG_SIZE = 16


class TpmError(Exception):
    pass


class RefusedForgedQuote(TpmError):
    """External data carried the TPM_GENERATED_VALUE prefix."""


class UnsealError(TpmError):
    pass


@dataclass(frozen=True)
class EventLogEntry:
    pcr_index: int
    measured_digest: bytes
    message: str

    def encode(self) -> bytes:
        return codec.encode(bytes([self.pcr_index]), self.measured_digest, codec.text(self.message))

    @classmethod
    def decode(cls, data: bytes) -> "EventLogEntry":
        idx, digest, msg = codec.decode(data, 3)
        if len(idx) != 1:
            raise codec.CodecError("pcr index must be one byte")
        return cls(idx[0], codec.fixed(digest, DIGEST_SIZE, "measured digest"), codec.read_text(msg))


def extend_value(old: bytes, measured: bytes) -> bytes:
    return sha256(old + measured)


def pcr_composite(values: Sequence[bytes], selection: Iterable[int]) -> bytes:
    return sha256(b"".join(values[i] for i in selection))


def pad_qualifying(data: bytes) -> bytes:
    if len(data) > QUALIFYING_SIZE:
        raise TpmError(f"qualifying data longer than {QUALIFYING_SIZE} bytes")
    return data + bytes(QUALIFYING_SIZE - len(data))


def check_selection(selection: Sequence[int]) -> tuple[int, ...]:
    sel = tuple(selection)
    if not sel:
        raise TpmError("PCR selection is empty")
    for i in sel:
        if not 0 <= i < NUM_PCRS:
            raise TpmError(f"PCR index {i} out of range")
    if any(a >= b for a, b in zip(sel, sel[1:])):
        raise TpmError("PCR selection must be strictly ascending")
    return sel


@dataclass(frozen=True)
class AttestationQuote:
    pcr_selection: tuple[int, ...]
    pcr_composite: bytes
    qualifying_data: bytes
    signature: bytes
    magic: bytes = MAGIC

    def signed_bytes(self) -> bytes:
        return self.magic + codec.encode(bytes(self.pcr_selection), self.pcr_composite,
                                         self.qualifying_data)

    def encode(self) -> bytes:
        return codec.encode(self.magic, bytes(self.pcr_selection), self.pcr_composite,
                            self.qualifying_data, self.signature)

    @classmethod
    def decode(cls, data: bytes) -> "AttestationQuote":
        magic, sel, comp, qd, sig = codec.decode(data, 5)
        return cls(tuple(sel), codec.fixed(comp, DIGEST_SIZE, "pcr composite"),
                   codec.fixed(qd, QUALIFYING_SIZE, "qualifying data"),
                   codec.fixed(sig, SIGNATURE_SIZE, "quote signature"),
                   codec.fixed(magic, 4, "magic"))


def verify_quote(public_key: bytes, quote: AttestationQuote) -> bool:
    if quote.magic != MAGIC:
        return False
    return verify(public_key, quote.signed_bytes(), quote.signature)


@dataclass(frozen=True)
class SealedBlob:
    nonce: bytes
    ciphertext: bytes
    tag: bytes

    def encode(self) -> bytes:
        return codec.encode(self.nonce, self.ciphertext, self.tag)

    @classmethod
    def decode(cls, data: bytes) -> "SealedBlob":
        nonce, ct, tag = codec.decode(data, 3)
        return cls(codec.fixed(nonce, NONCE_SIZE, "nonce"), ct, codec.fixed(tag, TAG_SIZE, "tag"))


_REDACTED = "<redacted>"


class Tpm:
    """Emulated TPM state.  Callers must serialize access per instance."""

    def __init__(self, seed: bytes):
        if len(seed) != 32:
            raise TpmError("TPM seed must be 32 bytes")
        self._ek = derive_seed("tpm/ek", seed)
        self._aik = KeyPair.from_seed(derive_seed("tpm/aik", seed))
        self._storage = derive_seed("tpm/storage", seed)
        self._rng_state = derive_seed("tpm/rng", seed)
        self._rng_counter = 0
        self._rng_buffer = b""
        self._pcrs = [ZERO_DIGEST] * NUM_PCRS
        self._log: list[EventLogEntry] = []

    # -- identity -------------------------------------------------------
    @property
    def attestation_public_key(self) -> bytes:
        return self._aik.public

    @property
    def label(self) -> bytes:
        return sha256(self._aik.public)

    # -- PCRs and log ---------------------------------------------------
    @property
    def pcrs(self) -> tuple[bytes, ...]:
        return tuple(self._pcrs)

    @property
    def event_log(self) -> tuple[EventLogEntry, ...]:
        return tuple(self._log)

    def is_fresh(self) -> bool:
        return not self._log and all(v == ZERO_DIGEST for v in self._pcrs)

    def pcr_extend(self, index: int, measured: bytes, message: str) -> bytes:
        if not 0 <= index < NUM_PCRS:
            raise TpmError(f"PCR index {index} out of range")
        if len(measured) != DIGEST_SIZE:
            raise TpmError("measured value must be a 32-byte digest")
        self._pcrs[index] = extend_value(self._pcrs[index], measured)
        self._log.append(EventLogEntry(index, bytes(measured), message))
        return self._pcrs[index]

    def quote(self, pcr_selection: Sequence[int], qualifying_data: bytes) -> AttestationQuote:
        sel = check_selection(pcr_selection)
        unsigned = AttestationQuote(sel, pcr_composite(self._pcrs, sel),
                                    pad_qualifying(qualifying_data), b"")
        return AttestationQuote(sel, unsigned.pcr_composite, unsigned.qualifying_data,
                                sign(self._aik.secret, unsigned.signed_bytes()))

    # -- general signing --------------------------------------------------
    def sign_external(self, data: bytes) -> bytes:
        if data[:4] == MAGIC:
            raise RefusedForgedQuote("external data starts with TPM_GENERATED_VALUE")
        return sign(self._aik.secret, data)

    def vrf_prove(self, x: bytes) -> VrfOutput:
        # "VRF" prefix means the signed bytes can never start with MAGIC.
        return vrf_prove(self._aik.secret, x)

    # -- randomness -------------------------------------------------------
    def get_random(self, n: int) -> bytes:
        if n < 0:
            raise TpmError("byte count must be non-negative")
        while len(self._rng_buffer) < n:
            self._rng_buffer += sha256(self._rng_state + codec.u64(self._rng_counter))
            self._rng_counter += 1
        out, self._rng_buffer = self._rng_buffer[:n], self._rng_buffer[n:]
        return out

    # -- protected storage ------------------------------------------------
    def seal(self, data: bytes) -> SealedBlob:
        nonce = self.get_random(NONCE_SIZE)
        sealed = AESGCM(self._storage).encrypt(nonce, bytes(data), b"poi/seal")
        return SealedBlob(nonce, sealed[:-TAG_SIZE], sealed[-TAG_SIZE:])

    def unseal(self, blob: SealedBlob) -> bytes:
        if len(blob.nonce) != NONCE_SIZE or len(blob.tag) != TAG_SIZE:
            raise UnsealError("malformed sealed blob")
        try:
            return AESGCM(self._storage).decrypt(blob.nonce, blob.ciphertext + blob.tag, b"poi/seal")
        except InvalidTag:
            raise UnsealError("authentication failed: wrong TPM or tampered blob") from None

    def derive_key(self, label: str) -> KeyPair:
        seed = hmac.new(self._ek, b"derive/" + label.encode(), "sha256").digest()
        return KeyPair.from_seed(seed)

    # -- secret confinement -----------------------------------------------
    def to_dict(self) -> dict:
        return {
            "endorsement_secret": _REDACTED,
            "attestation_secret": _REDACTED,
            "storage_secret": _REDACTED,
            "rng_state": _REDACTED,
            "attestation_public_key": self._aik.public.hex(),
            "pcrs": [v.hex() for v in self._pcrs],
            "event_log": [
                {"pcr": e.pcr_index, "digest": e.measured_digest.hex(), "message": e.message}
                for e in self._log
            ],
        }

    def __repr__(self) -> str:
        return f"Tpm(label={self.label.hex()[:16]}, log_entries={len(self._log)})"

    def __getstate__(self):
        raise TypeError("TPM state cannot be serialized; secrets never leave the device")


def tpm_create(seed: bytes) -> Tpm:
    return Tpm(seed)
