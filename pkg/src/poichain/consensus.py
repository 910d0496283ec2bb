"""Proof-of-Integrity consensus: miner list, joins, election, block production and validation.

A block is valid when its miner is enrolled, its quote shows a listed PCR
composite, the quote is signed by the miner's certified key over the header
binding hash, the miner is the one elected for the height, and the body roots
recompute.  The first valid block at a height is final.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Sequence

from . import codec
from .attestation import (
    AttestationVerdict,
    Failure,
    IntegrityList,
    verify_report,
)
from .blocks import Block, BlockHeader, ElectionMode, JoinRequest, body_roots
from .crypto import Certificate, CryptoError, VrfOutput, vrf_prove, vrf_verify
from .execution import (
    ExecutionCounter,
    ExecutionError,
    Transaction,
    WorldState,
    apply_results,
    execute_transactions,
    reexecute,
)
from .tpm import CONSENSUS_PCRS, Tpm, verify_quote

log = logging.getLogger(__name__)


class Verdict(str, Enum):
    ACCEPTED = "accepted"
    STALE = "stale"
    UNKNOWN_MINER = "unknown_miner"
    INTEGRITY_NOT_LISTED = "integrity_not_listed"
    BAD_QUOTE = "bad_quote"
    NOT_ELECTED = "not_elected"
    BAD_ROOTS = "bad_roots"
    EQUIVOCATION = "equivocation"


class ConsensusError(Exception):
    pass


class NotElected(ConsensusError):
    pass


class ChainVerificationError(ConsensusError):
    def __init__(self, height: int, verdict: str):
        super().__init__(f"invalid block at height {height}: {verdict}")
        self.height = height
        self.verdict = verdict


@dataclass(frozen=True)
class MinerRecord:
    label: bytes
    certificate: Certificate
    join_height: int

    def encode(self) -> bytes:
        return codec.encode(self.label, self.certificate.encode(), codec.u64(self.join_height))


class MinerList:
    """Miners sorted ascending by label bytes; no duplicate labels."""

    def __init__(self, records: Iterable[MinerRecord] = ()):
        recs = tuple(sorted(records, key=lambda r: r.label))
        for a, b in zip(recs, recs[1:]):
            if a.label == b.label:
                raise ConsensusError("duplicate miner label")
        for r in recs:
            if r.label != r.certificate.subject_label:
                raise ConsensusError("miner label does not match its certificate")
        self.records = recs
        self._index = {r.label: i for i, r in enumerate(recs)}

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i: int) -> MinerRecord:
        return self.records[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, MinerList) and self.records == other.records

    def __contains__(self, label: bytes) -> bool:
        return label in self._index

    def index_of(self, label: bytes) -> Optional[int]:
        return self._index.get(label)

    def get(self, label: bytes) -> Optional[MinerRecord]:
        i = self._index.get(label)
        return None if i is None else self.records[i]

    def insert(self, record: MinerRecord) -> "MinerList":
        return MinerList(self.records + (record,))

    def labels(self) -> list[bytes]:
        return [r.label for r in self.records]

    def encode(self) -> bytes:
        return codec.encode_list(r.encode() for r in self.records)


@dataclass
class ChainState:
    """Single-writer chain: heights contiguous from 0, one block per height."""

    blocks: list[Block]
    miner_list: MinerList
    integrity_list: IntegrityList
    trusted_roots: dict[bytes, bytes]
    world_state: WorldState
    election_mode: ElectionMode = ElectionMode.ROUND_ROBIN
    join_log: list[tuple[int, bytes, Failure]] = field(default_factory=list)

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @property
    def tip_hash(self) -> bytes:
        return self.blocks[-1].hash

    def block_hashes(self) -> list[bytes]:
        return [b.hash for b in self.blocks]


# -- election ---------------------------------------------------------------

def elect_round_robin(height: int, miner_list) -> int:
    n = miner_list if isinstance(miner_list, int) else len(miner_list)
    if n <= 0:
        raise ConsensusError("cannot elect from an empty miner list")
    return height % n


def vrf_index(out: VrfOutput, n: int) -> int:
    return out.as_int() % n


def vrf_eligibility(prover, prev_block_hash: bytes, miner_index: int, n: int) -> tuple[bool, VrfOutput]:
    """Self-election: evaluate the VRF over the previous block hash.

    ``prover`` is either a raw 32-byte signing secret or a :class:`Tpm`,
    whose attestation key then evaluates the VRF without leaving the device.
    """
    if n < 1:
        raise ConsensusError("n must be at least 1")
    out = prover.vrf_prove(prev_block_hash) if isinstance(prover, Tpm) else vrf_prove(prover, prev_block_hash)
    return vrf_index(out, n) == miner_index, out


def vrf_round(provers: Sequence, prev_block_hash: bytes) -> list[tuple[int, VrfOutput]]:
    """Eligible (index, output) pairs for one round, ``provers`` in miner-list order.

    Sorted by VRF hash so the first entry is the tie-break winner.
    """
    n = len(provers)
    winners = []
    for i, p in enumerate(provers):
        ok, out = vrf_eligibility(p, prev_block_hash, i, n)
        if ok:
            winners.append((i, out))
    return sorted(winners, key=lambda w: w[1].hash)


def check_vrf_eligibility(public_key: bytes, prev_block_hash: bytes, out: VrfOutput,
                          miner_index: int, n: int) -> bool:
    try:
        if not vrf_verify(public_key, prev_block_hash, out):
            return False
    except CryptoError:
        return False
    return vrf_index(out, n) == miner_index


# -- joins ------------------------------------------------------------------

def process_join_request(state: ChainState, req: JoinRequest,
                         height: Optional[int] = None) -> tuple[AttestationVerdict, MinerList]:
    """Admit a join carried by an accepted block at ``height`` (default: tip)."""
    height = state.height if height is None else height
    if req.report.event_log is None:
        return AttestationVerdict(Failure.LOG_MISMATCH), state.miner_list
    verdict = verify_report(req.report, state.trusted_roots, state.integrity_list, req.binding())
    if not verdict.accepted:
        return verdict, state.miner_list
    if req.label in state.miner_list:
        return AttestationVerdict(Failure.DUPLICATE), state.miner_list
    record = MinerRecord(req.label, req.report.identity_certificate, height)
    return verdict, state.miner_list.insert(record)


# -- validation -------------------------------------------------------------

def _eligible(state: ChainState, header: BlockHeader, record: MinerRecord) -> bool:
    n = len(state.miner_list)
    index = state.miner_list.index_of(record.label)
    if header.election_mode == ElectionMode.ROUND_ROBIN:
        if header.vrf_output is not None:
            return False
        return elect_round_robin(header.height + header.fallback, n) == index
    if state.election_mode != ElectionMode.VRF or header.fallback != 0 or header.vrf_output is None:
        return False
    return check_vrf_eligibility(record.certificate.subject_public_key, header.prev_hash,
                                 header.vrf_output, index, n)


def check_block(state: ChainState, block: Block, *, paranoid: bool = False,
                counter: Optional[ExecutionCounter] = None) -> tuple[Verdict, Optional[WorldState]]:
    """Validate ``block`` against the current tip; on success also return the post-state.

    Pure with respect to ``state``.  With ``paranoid`` the transactions are
    re-executed (baseline mode) instead of trusting the recorded results.
    """
    h = block.header
    if h.height <= state.height:
        if state.blocks[h.height].hash == block.hash:
            return Verdict.STALE, None
        return Verdict.EQUIVOCATION, None
    if h.height != state.height + 1 or h.prev_hash != state.tip_hash:
        return Verdict.STALE, None

    record = state.miner_list.get(h.miner_label)
    if record is None:
        return Verdict.UNKNOWN_MINER, None

    q = h.quote
    if q is None:
        return Verdict.BAD_QUOTE, None
    if q.pcr_composite not in state.integrity_list:
        return Verdict.INTEGRITY_NOT_LISTED, None
    try:
        signed = verify_quote(record.certificate.subject_public_key, q)
    except CryptoError:
        signed = False
    if not signed or q.qualifying_data != h.binding_hash or q.pcr_selection != CONSENSUS_PCRS:
        return Verdict.BAD_QUOTE, None

    if not _eligible(state, h, record):
        return Verdict.NOT_ELECTED, None

    if len(block.results) != len(block.transactions):
        return Verdict.BAD_ROOTS, None
    if body_roots(block.transactions, block.results, block.join_requests) != (
            h.tx_root, h.results_root, h.joins_root):
        return Verdict.BAD_ROOTS, None
    try:
        if paranoid:
            post = reexecute(state.world_state, block.transactions, block.results, counter)
            if post is None:
                return Verdict.BAD_ROOTS, None
        else:
            post, _ = apply_results(state.world_state, block.transactions, block.results)
    except ExecutionError:
        return Verdict.BAD_ROOTS, None
    if post.root != h.state_root:
        return Verdict.BAD_ROOTS, None
    return Verdict.ACCEPTED, post


def validate_block(state: ChainState, block: Block, *, paranoid: bool = False,
                   counter: Optional[ExecutionCounter] = None) -> Verdict:
    return check_block(state, block, paranoid=paranoid, counter=counter)[0]


def append_block(state: ChainState, block: Block,
                 post_state: WorldState) -> list[tuple[bytes, AttestationVerdict]]:
    """Make ``block`` final and process the joins it carries.

    Joins become electable from the next height.  Returns one
    (label, verdict) pair per join request.
    """
    if block.height != state.height + 1:
        raise ConsensusError("append out of order")
    state.blocks.append(block)
    state.world_state = post_state
    outcomes = []
    for req in block.join_requests:
        verdict, state.miner_list = process_join_request(state, req, block.height)
        state.join_log.append((block.height, req.label, verdict.failure))
        outcomes.append((req.label, verdict))
    return outcomes


def accept_block(state: ChainState, block: Block, **kw) -> Verdict:
    verdict, post = check_block(state, block, **kw)
    if verdict is Verdict.ACCEPTED:
        append_block(state, block, post)
    return verdict


# -- production -------------------------------------------------------------

@dataclass
class MinerContext:
    chain: ChainState
    tpm: Tpm
    offchain: Optional[object] = None
    counter: ExecutionCounter = field(default_factory=ExecutionCounter)

    @property
    def label(self) -> bytes:
        return self.tpm.label


def produce_block(ctx: MinerContext, height: int, txs: Sequence[Transaction],
                  joins: Sequence[JoinRequest] = (), *,
                  election: Optional[ElectionMode] = None, fallback: int = 0) -> Block:
    """Build, execute and quote a block for ``height``.

    ``election`` defaults to the chain's mode.  A VRF chain produces a
    round-robin block only as a fallback after an empty round.
    """
    chain = ctx.chain
    if height != chain.height + 1:
        raise ConsensusError(f"can only produce height {chain.height + 1}, asked for {height}")
    election = ElectionMode(election or chain.election_mode)
    index = chain.miner_list.index_of(ctx.label)
    if index is None:
        raise NotElected("miner is not enrolled")
    n = len(chain.miner_list)
    vrf_out = None
    if election == ElectionMode.VRF:
        if chain.election_mode != ElectionMode.VRF or fallback:
            raise ConsensusError("VRF election needs a VRF chain and no fallback offset")
        eligible, vrf_out = vrf_eligibility(ctx.tpm, chain.tip_hash, index, n)
        if not eligible:
            raise NotElected(f"VRF output does not select index {index} at height {height}")
    elif elect_round_robin(height + fallback, n) != index:
        raise NotElected(f"round-robin selects index {(height + fallback) % n}, not {index}")

    results, _post, state_root = execute_transactions(chain.world_state, txs, ctx.tpm,
                                                      ctx.offchain, ctx.counter)
    tx_root, results_root, joins_root = body_roots(txs, results, joins)
    header = BlockHeader(height, chain.tip_hash, tx_root, results_root, joins_root, state_root,
                         ctx.label, election, fallback, vrf_out)
    header = replace(header, quote=ctx.tpm.quote(CONSENSUS_PCRS, header.binding_hash))
    return Block(header, tuple(txs), tuple(results), tuple(joins))


# -- cold start -------------------------------------------------------------

def rebuild_from_genesis(blocks: Sequence[Block], genesis,
                         counter: Optional[ExecutionCounter] = None) -> ChainState:
    """Fold every block onto the genesis state without executing transactions."""
    if not blocks:
        raise ChainVerificationError(0, "missing genesis block")
    state = genesis.initial_state()
    if blocks[0].encode() != state.blocks[0].encode():
        raise ChainVerificationError(0, "genesis_mismatch")
    for block in blocks[1:]:
        verdict, post = check_block(state, block, counter=counter)
        if verdict is not Verdict.ACCEPTED:
            raise ChainVerificationError(block.height, verdict.value)
        append_block(state, block, post)
    return state
