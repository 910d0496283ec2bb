"""Malicious behaviours attached to single roster slots.

Each adversary knows the verdict honest nodes must return for its output, so
a scenario can assert that every malicious block or join was rejected for
the right reason.
"""

from __future__ import annotations

from dataclasses import replace
from typing import TYPE_CHECKING

from ..attestation import Failure
from ..blocks import Block, BlockHeader, ElectionMode
from ..consensus import Verdict, produce_block
from ..crypto import KeyPair, derive_seed
from ..execution import COUNTER, ContractCall, Transaction
from ..merkle import merkle_root
from ..tpm import CONSENSUS_PCRS, Tpm
from .params import AdversaryKind, AdversarySpec, GossipBlock, Send, SimParams

if TYPE_CHECKING:
    from .node import Node

EXPECTED_VERDICT = {
    AdversaryKind.FORGED_CERT_JOIN: Failure.BAD_CERTIFICATE.value,
    AdversaryKind.TAMPERED_PCR_MINER: Verdict.INTEGRITY_NOT_LISTED.value,
    AdversaryKind.QUOTE_REPLAY_BLOCK: Verdict.BAD_QUOTE.value,
    AdversaryKind.EQUIVOCATING_MINER: Verdict.EQUIVOCATION.value,
    AdversaryKind.SPAM_INVALID_BLOCKS: Verdict.UNKNOWN_MINER.value,
}


def adversary_inject(params: SimParams, kind, slot: int = 0) -> SimParams:
    """Return ``params`` with the named adversary attached to roster slot ``slot``."""
    kind = AdversaryKind(kind)
    return replace(params, adversaries=params.adversaries + (AdversarySpec(kind, slot),))


def rogue_authority(seed: int) -> KeyPair:
    """A CA that no honest node trusts."""
    return KeyPair.from_seed(derive_seed("adversary/rogue-ca", seed))


class Adversary:
    kind: AdversaryKind

    @property
    def expected_verdict(self) -> str:
        return EXPECTED_VERDICT[self.kind]

    @property
    def targets_joins(self) -> bool:
        return self.kind == AdversaryKind.FORGED_CERT_JOIN

    def transform(self, node: "Node", block: Block, now: float) -> list[tuple[float, Block, bool]]:
        """Blocks to emit in place of an honestly produced one: (delay, block, self_accept)."""
        return [(0.0, block, True)]

    def on_accept(self, node: "Node", block: Block, now: float) -> list:
        return []

    def malicious_join(self, req) -> int:
        return 0


class TamperedPcrMiner(Adversary):
    """Boots an altered manifest; its quotes show an unlisted composite."""

    kind = AdversaryKind.TAMPERED_PCR_MINER

    def transform(self, node, block, now):
        node.stats.malicious_blocks += 1
        return [(0.0, block, True)]  # self-validation fails, so it never appends


class QuoteReplayMiner(Adversary):
    """Pastes the quote from its enrolment report onto every block."""

    kind = AdversaryKind.QUOTE_REPLAY_BLOCK

    def transform(self, node, block, now):
        old = next(r.report.quote for r in node.chain.blocks[0].join_requests if r.label == node.label)
        node.stats.malicious_blocks += 1
        return [(0.0, block.with_quote(old), False)]


class EquivocatingMiner(Adversary):
    """Publishes its block, then a second valid-looking block for the same height."""

    kind = AdversaryKind.EQUIVOCATING_MINER

    def __init__(self, delay_ms: float):
        self.delay_ms = delay_ms

    def transform(self, node, block, now):
        h = block.header
        extra = Transaction.create(KeyPair.from_seed(derive_seed("adversary/equivocation", node.label, h.height)),
                                   0, ContractCall(COUNTER, "increment", b"equivocation"))
        twin = produce_block(node.context(), h.height, block.transactions + (extra,), block.join_requests,
                             election=h.election_mode, fallback=h.fallback)
        node.stats.malicious_blocks += 1
        return [(0.0, block, True), (self.delay_ms, twin, False)]


class ForgedCertJoiner(Adversary):
    """Requests membership with a certificate from an untrusted CA."""

    kind = AdversaryKind.FORGED_CERT_JOIN

    def malicious_join(self, req) -> int:
        return 1


class InvalidBlockSpammer(Adversary):
    """Relay that answers every accepted block with a block from an unknown miner."""

    kind = AdversaryKind.SPAM_INVALID_BLOCKS

    def __init__(self, seed: int):
        self.seed = seed

    def on_accept(self, node, block, now):
        h = block.height + 1
        if h > node.params.target_height:
            return []
        fake = Tpm(derive_seed("adversary/spam", self.seed, node.node_id, h))
        empty = merkle_root([])
        header = BlockHeader(h, block.hash, empty, empty, empty, node.chain.world_state.root,
                             fake.label, ElectionMode.ROUND_ROBIN)
        header = replace(header, quote=fake.quote(CONSENSUS_PCRS, header.binding_hash))
        node.stats.malicious_blocks += 1
        return [Send(GossipBlock(Block(header).encode()))]


def make_adversary(kind: AdversaryKind, params: SimParams) -> Adversary:
    kind = AdversaryKind(kind)
    if kind == AdversaryKind.TAMPERED_PCR_MINER:
        return TamperedPcrMiner()
    if kind == AdversaryKind.QUOTE_REPLAY_BLOCK:
        return QuoteReplayMiner()
    if kind == AdversaryKind.EQUIVOCATING_MINER:
        # long enough that every honest node already holds the first block
        return EquivocatingMiner(3 * params.latency_max_ms)
    if kind == AdversaryKind.FORGED_CERT_JOIN:
        return ForgedCertJoiner()
    return InvalidBlockSpammer(params.seed)
