"""Measured boot, integrity reports and remote-attestation checks."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

from . import codec
from .crypto import ZERO_DIGEST, Certificate, CryptoError, verify_certificate
from .tpm import (
    CONSENSUS_PCRS,
    NUM_PCRS,
    AttestationQuote,
    EventLogEntry,
    Tpm,
    TpmError,
    extend_value,
    pcr_composite,
    verify_quote,
)


class AttestationError(Exception):
    pass


class Stage(str, Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"
    IMA = "ima"


STAGE_PCR = {Stage.STATIC: 0, Stage.DYNAMIC: 1, Stage.IMA: 2}
_STAGE_ORDER = {Stage.STATIC: 0, Stage.DYNAMIC: 1, Stage.IMA: 2}


@dataclass(frozen=True)
class Component:
    stage: Stage
    name: str
    digest: bytes


@dataclass(frozen=True)
class MeasurementManifest:
    components: tuple[Component, ...]

    def __post_init__(self):
        if not self.components:
            raise AttestationError("manifest has no components")
        order = [_STAGE_ORDER[Stage(c.stage)] for c in self.components]
        if order != sorted(order):
            raise AttestationError("manifest stages must run static -> dynamic -> ima")

    def replace_digest(self, name: str, digest: bytes) -> "MeasurementManifest":
        return MeasurementManifest(tuple(
            Component(c.stage, c.name, digest if c.name == name else c.digest)
            for c in self.components))


def simulate_measured_boot(tpm: Tpm, manifest: MeasurementManifest) -> None:
    if not tpm.is_fresh():
        raise AttestationError("measured boot requires a fresh TPM; PCRs cannot be reset")
    for c in manifest.components:
        tpm.pcr_extend(STAGE_PCR[Stage(c.stage)], c.digest, c.name)


def replay_event_log(log: Iterable[EventLogEntry], selection: Sequence[int] = CONSENSUS_PCRS) -> bytes:
    bank = [ZERO_DIGEST] * NUM_PCRS
    for entry in log:
        if not 0 <= entry.pcr_index < NUM_PCRS:
            raise AttestationError(f"event log entry names PCR {entry.pcr_index}")
        bank[entry.pcr_index] = extend_value(bank[entry.pcr_index], entry.measured_digest)
    for i in selection:
        if not 0 <= i < NUM_PCRS:
            raise AttestationError(f"selection names PCR {i}")
    return pcr_composite(bank, selection)


@dataclass(frozen=True)
class IntegrityReport:
    quote: AttestationQuote
    identity_certificate: Certificate
    event_log: Optional[tuple[EventLogEntry, ...]] = None

    def encode(self) -> bytes:
        log = None
        if self.event_log is not None:
            log = codec.encode_list(e.encode() for e in self.event_log)
        return codec.encode(self.quote.encode(), self.identity_certificate.encode(),
                            codec.optional(log))

    @classmethod
    def decode(cls, data: bytes) -> "IntegrityReport":
        q, cert, log = codec.decode(data, 3)
        raw_log = codec.read_optional(log)
        entries = None
        if raw_log is not None:
            entries = tuple(EventLogEntry.decode(e) for e in codec.decode(raw_log))
        return cls(AttestationQuote.decode(q), Certificate.decode(cert), entries)


class IntegrityList:
    """Allowed PCR composites.  Membership is exact byte equality."""

    def __init__(self, allowed: Iterable[bytes]):
        self._allowed = frozenset(bytes(a) for a in allowed)

    def __contains__(self, composite: bytes) -> bool:
        return composite in self._allowed

    def __len__(self) -> int:
        return len(self._allowed)

    def __iter__(self):
        return iter(sorted(self._allowed))

    def __eq__(self, other) -> bool:
        return isinstance(other, IntegrityList) and self._allowed == other._allowed

    def __repr__(self) -> str:
        return f"IntegrityList({len(self._allowed)} entries)"

    def without(self, composite: bytes) -> "IntegrityList":
        return IntegrityList(self._allowed - {composite})


class Failure(str, Enum):
    NONE = "none"
    BAD_CERTIFICATE = "bad_certificate"
    BAD_SIGNATURE = "bad_signature"
    INTEGRITY_NOT_LISTED = "integrity_not_listed"
    BAD_QUALIFYING_DATA = "bad_qualifying_data"
    LOG_MISMATCH = "log_mismatch"
    DUPLICATE = "duplicate"  # join-only: label already in the miner list


@dataclass(frozen=True)
class AttestationVerdict:
    failure: Failure = Failure.NONE

    @property
    def accepted(self) -> bool:
        return self.failure is Failure.NONE


ACCEPTED = AttestationVerdict()


def build_report(tpm: Tpm, qualifying_data: bytes, cert: Certificate,
                 include_log: bool) -> IntegrityReport:
    if cert.subject_public_key != tpm.attestation_public_key:
        raise AttestationError("certificate subject key does not match the TPM attestation key")
    q = tpm.quote(CONSENSUS_PCRS, qualifying_data)
    return IntegrityReport(q, cert, tpm.event_log if include_log else None)


def verify_report(report: IntegrityReport, trusted_roots: Mapping[bytes, bytes],
                  integrity_list: IntegrityList, expected_qualifying_data: bytes) -> AttestationVerdict:
    """Run the remote-attestation checks in their fixed order.

    certificate -> quote signature -> qualifying-data binding -> integrity
    list membership -> event-log replay (only when a log is attached).  The
    first failing check names the verdict.
    """
    cert = report.identity_certificate
    if not verify_certificate(cert, trusted_roots):
        return AttestationVerdict(Failure.BAD_CERTIFICATE)
    q = report.quote
    try:
        sig_ok = verify_quote(cert.subject_public_key, q)
    except CryptoError:
        sig_ok = False
    if not sig_ok:
        return AttestationVerdict(Failure.BAD_SIGNATURE)
    if q.qualifying_data != expected_qualifying_data:
        return AttestationVerdict(Failure.BAD_QUALIFYING_DATA)
    if q.pcr_composite not in integrity_list:
        return AttestationVerdict(Failure.INTEGRITY_NOT_LISTED)
    if report.event_log is not None:
        try:
            replayed = replay_event_log(report.event_log, q.pcr_selection)
        except (AttestationError, TpmError):
            return AttestationVerdict(Failure.LOG_MISMATCH)
        if replayed != q.pcr_composite:
            return AttestationVerdict(Failure.LOG_MISMATCH)
    return ACCEPTED
