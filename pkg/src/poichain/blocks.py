"""Block, header and join-request wire formats."""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property, lru_cache
from typing import Optional

from . import codec
from .attestation import IntegrityReport
from .crypto import DIGEST_SIZE, VrfOutput, sha256
from .execution import ExecutionResult, Transaction
from .merkle import merkle_root
from .tpm import AttestationQuote


class ElectionMode(str, Enum):
    ROUND_ROBIN = "round_robin"
    VRF = "vrf"


@dataclass(frozen=True)
class JoinRequest:
    report: IntegrityReport
    requested_at: int

    def payload(self) -> bytes:
        return codec.encode(self.report.identity_certificate.encode(), codec.u64(self.requested_at))

    def binding(self) -> bytes:
        """Qualifying data the report's quote must carry."""
        return sha256(self.payload())

    @property
    def label(self) -> bytes:
        return self.report.identity_certificate.subject_label

    def encode(self) -> bytes:
        return codec.encode(self.report.encode(), codec.u64(self.requested_at))

    @classmethod
    def decode(cls, data: bytes) -> "JoinRequest":
        report, at = codec.decode(data, 2)
        req = cls(IntegrityReport.decode(report), codec.read_u64(at))
        if req.report.event_log is None:
            raise codec.CodecError("join request must carry an event log")
        return req

    @cached_property
    def digest(self) -> bytes:
        return sha256(self.encode())


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: bytes
    tx_root: bytes
    results_root: bytes
    joins_root: bytes
    state_root: bytes
    miner_label: bytes
    election_mode: ElectionMode
    fallback: int = 0
    vrf_output: Optional[VrfOutput] = None
    quote: Optional[AttestationQuote] = None

    def _fields(self) -> list[bytes]:
        return [codec.u64(self.height), self.prev_hash, self.tx_root, self.results_root,
                self.joins_root, self.state_root, self.miner_label,
                codec.text(ElectionMode(self.election_mode).value), codec.u64(self.fallback),
                codec.optional(None if self.vrf_output is None else self.vrf_output.encode())]

    def binding_bytes(self) -> bytes:
        return codec.encode(*self._fields())

    @cached_property
    def binding_hash(self) -> bytes:
        """Hash of every header field except the quote; the quote's qualifying data."""
        return sha256(self.binding_bytes())

    def encode(self) -> bytes:
        q = None if self.quote is None else self.quote.encode()
        return codec.encode(*self._fields(), codec.optional(q))

    @classmethod
    def decode(cls, data: bytes) -> "BlockHeader":
        (h, prev, txr, resr, joinr, stater, label, mode, fb, vrf, q) = codec.decode(data, 11)
        raw_vrf = codec.read_optional(vrf)
        raw_q = codec.read_optional(q)
        try:
            election_mode = ElectionMode(codec.read_text(mode))
        except ValueError:
            raise codec.CodecError("unknown election mode") from None
        return cls(codec.read_u64(h),
                   codec.fixed(prev, DIGEST_SIZE, "prev hash"),
                   codec.fixed(txr, DIGEST_SIZE, "tx root"),
                   codec.fixed(resr, DIGEST_SIZE, "results root"),
                   codec.fixed(joinr, DIGEST_SIZE, "joins root"),
                   codec.fixed(stater, DIGEST_SIZE, "state root"),
                   codec.fixed(label, DIGEST_SIZE, "miner label"),
                   election_mode,
                   codec.read_u64(fb),
                   None if raw_vrf is None else VrfOutput.decode(raw_vrf),
                   None if raw_q is None else AttestationQuote.decode(raw_q))

    @cached_property
    def hash(self) -> bytes:
        return sha256(self.encode())


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple[Transaction, ...] = ()
    results: tuple[ExecutionResult, ...] = ()
    join_requests: tuple[JoinRequest, ...] = ()

    @property
    def height(self) -> int:
        return self.header.height

    @property
    def hash(self) -> bytes:
        return self.header.hash

    def tx_section(self) -> bytes:
        return codec.encode_list(t.encode() for t in self.transactions)

    def results_section(self) -> bytes:
        return codec.encode_list(r.encode() for r in self.results)

    def joins_section(self) -> bytes:
        return codec.encode_list(j.encode() for j in self.join_requests)

    @cached_property
    def encoded(self) -> bytes:
        return codec.encode(self.header.encode(), self.tx_section(), self.results_section(),
                            self.joins_section())

    def encode(self) -> bytes:
        return self.encoded

    def with_quote(self, quote: AttestationQuote) -> "Block":
        return replace(self, header=replace(self.header, quote=quote))


def body_roots(txs, results, joins) -> tuple[bytes, bytes, bytes]:
    return (merkle_root([t.encode() for t in txs]),
            merkle_root([r.encode() for r in results]),
            merkle_root([j.encode() for j in joins]))


def _decode_block(data: bytes) -> Block:
    header, txs, results, joins = codec.decode(data, 4)
    block = Block(BlockHeader.decode(header),
                  tuple(Transaction.decode(t) for t in codec.decode(txs)),
                  tuple(ExecutionResult.decode(r) for r in codec.decode(results)),
                  tuple(JoinRequest.decode(j) for j in codec.decode(joins)))
    if block.encode() != data:
        raise codec.CodecError("non-canonical block encoding")
    return block


@lru_cache(maxsize=8192)
def decode_block(data: bytes) -> Block:
    """Strict decode.  Memoised: blocks are immutable and decoding is pure."""
    return _decode_block(data)
