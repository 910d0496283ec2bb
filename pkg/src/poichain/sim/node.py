"""Per-node state machine driven by delivered messages and local timers."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from ..attestation import Failure, verify_report
from ..blocks import Block, ElectionMode, JoinRequest, decode_block
from ..codec import CodecError
from ..consensus import (
    ChainState,
    MinerContext,
    NotElected,
    Verdict,
    append_block,
    check_block,
    produce_block,
)
from ..crypto import CryptoError, sha256
from ..execution import ExecutionCounter, Transaction
from ..tpm import Tpm
from .params import (
    CandidateWindowClose,
    GossipBlock,
    NodeRole,
    NodeSpec,
    Send,
    SimParams,
    SubmitJoin,
    SubmitTransaction,
    TimeoutFire,
    Timer,
)

log = logging.getLogger(__name__)


@dataclass
class NodeStats:
    produced: int = 0
    accepted: int = 0
    duplicates: int = 0
    malformed: int = 0
    orphans: int = 0
    superseded_candidates: int = 0
    rejections: Counter = field(default_factory=Counter)       # block verdict -> count
    join_rejections: Counter = field(default_factory=Counter)  # attestation failure -> count
    joins_enrolled: int = 0
    malicious_blocks: int = 0
    malicious_joins: int = 0


class Node:
    """One simulated participant.

    Trusted miners own a TPM and may produce blocks; relays only validate,
    apply results and forward.  Access to the TPM is exclusive to the node.
    """

    def __init__(self, node_id: int, spec: NodeSpec, chain: ChainState, params: SimParams,
                 tpm: Optional[Tpm] = None, offchain=None, adversary=None):
        if spec.role == NodeRole.UNTRUSTED_RELAY and tpm is not None:
            raise ValueError("relays do not hold a TPM")
        self.node_id = node_id
        self.spec = spec
        self.chain = chain
        self.params = params
        self.tpm = tpm
        self.offchain = offchain
        self.adversary = adversary
        self.counter = ExecutionCounter()
        self.stats = NodeStats()
        self.seen: set[bytes] = set()
        self.mempool: dict[bytes, Transaction] = {}
        self.join_pool: dict[bytes, JoinRequest] = {}
        self.orphans: dict[int, list[Block]] = {}
        self.candidates: dict[int, list[Block]] = {}
        self.accept_times: dict[int, float] = {0: 0.0}

    # -- helpers ------------------------------------------------------------
    @property
    def is_relay(self) -> bool:
        return self.spec.role == NodeRole.UNTRUSTED_RELAY

    @property
    def is_honest(self) -> bool:
        return self.spec.adversary is None

    @property
    def label(self) -> Optional[bytes]:
        return None if self.tpm is None else self.tpm.label

    @property
    def enrolled(self) -> bool:
        return self.tpm is not None and self.tpm.label in self.chain.miner_list

    def context(self) -> MinerContext:
        return MinerContext(self.chain, self.tpm, self.offchain, self.counter)

    def _first_sight(self, payload: bytes) -> bool:
        digest = sha256(payload)
        if digest in self.seen:
            self.stats.duplicates += 1
            return False
        self.seen.add(digest)
        return True

    # -- dispatch -----------------------------------------------------------
    def step(self, message, now: float) -> list:
        out: list = []
        if isinstance(message, GossipBlock):
            self._on_block_bytes(message.payload, now, out)
        elif isinstance(message, SubmitTransaction):
            self._on_tx(message, out)
        elif isinstance(message, SubmitJoin):
            self._on_join(message, out)
        elif isinstance(message, TimeoutFire):
            self._on_timeout(message.height, message.k, now, out)
        elif isinstance(message, CandidateWindowClose):
            self._on_window_close(message.height, now, out)
        else:
            self.stats.malformed += 1
        return out

    # -- transactions and joins -------------------------------------------
    def _on_tx(self, msg: SubmitTransaction, out: list) -> None:
        if not self._first_sight(msg.payload):
            return
        try:
            tx = Transaction.decode(msg.payload)
        except (CodecError, CryptoError):
            self.stats.malformed += 1
            return
        if tx.nonce >= self.chain.world_state.account(tx.sender).nonce:
            self.mempool[tx.digest] = tx
        if msg.external or self.is_relay:
            out.append(Send(SubmitTransaction(msg.payload)))

    def _join_failure(self, req: JoinRequest) -> Failure:
        if req.report.event_log is None:
            return Failure.LOG_MISMATCH
        verdict = verify_report(req.report, self.chain.trusted_roots, self.chain.integrity_list,
                                req.binding())
        if verdict.accepted and req.label in self.chain.miner_list:
            return Failure.DUPLICATE
        return verdict.failure

    def _on_join(self, msg: SubmitJoin, out: list) -> None:
        if not self._first_sight(msg.payload):
            return
        try:
            req = JoinRequest.decode(msg.payload)
        except (CodecError, CryptoError):
            self.stats.malformed += 1
            return
        if msg.external and self.adversary is not None:
            self.stats.malicious_joins += self.adversary.malicious_join(req)
        failure = self._join_failure(req)
        if failure is not Failure.NONE:
            self.stats.join_rejections[failure.value] += 1
            # the submitter still announces its own request so peers can judge it
            if msg.external:
                out.append(Send(SubmitJoin(msg.payload)))
            return
        self.join_pool[req.digest] = req
        if msg.external or self.is_relay:
            out.append(Send(SubmitJoin(msg.payload)))

    # -- blocks -------------------------------------------------------------
    def _on_block_bytes(self, payload: bytes, now: float, out: list) -> None:
        if not self._first_sight(payload):
            return
        try:
            block = decode_block(payload)
        except (CodecError, CryptoError, ValueError):
            self.stats.malformed += 1
            return
        self._receive_block(block, now, out, forward=True)

    def _is_vrf_candidate(self, block: Block) -> bool:
        return (self.chain.election_mode == ElectionMode.VRF
                and block.header.election_mode == ElectionMode.VRF
                and block.height == self.chain.height + 1)

    def _receive_block(self, block: Block, now: float, out: list, forward: bool) -> None:
        h = block.height
        if h > self.chain.height + 1:
            self.orphans.setdefault(h, []).append(block)
            self.stats.orphans += 1
            return
        if self._is_vrf_candidate(block):
            verdict, _ = check_block(self.chain, block)
            if verdict is not Verdict.ACCEPTED:
                self.stats.rejections[verdict.value] += 1
                return
            self._add_candidate(block, now, out)
            if forward:
                out.append(Send(GossipBlock(block.encode())))
            return
        verdict, post = check_block(self.chain, block, paranoid=self.params.paranoid_validation,
                                    counter=self.counter)
        if verdict is not Verdict.ACCEPTED:
            self.stats.rejections[verdict.value] += 1
            return
        if forward:
            out.append(Send(GossipBlock(block.encode())))
        self._accept(block, post, now, out)

    def _add_candidate(self, block: Block, now: float, out: list) -> None:
        cands = self.candidates.setdefault(block.height, [])
        if not cands:
            out.append(Timer(now + self.params.candidate_window_ms, CandidateWindowClose(block.height)))
        cands.append(block)

    def _on_window_close(self, height: int, now: float, out: list) -> None:
        cands = self.candidates.pop(height, [])
        if height != self.chain.height + 1 or not cands:
            return
        for block in sorted(cands, key=lambda b: b.header.vrf_output.hash):
            own = block.header.miner_label == self.label
            verdict, post = check_block(self.chain, block,
                                        paranoid=self.params.paranoid_validation and not own,
                                        counter=self.counter)
            if verdict is Verdict.ACCEPTED:
                self.stats.superseded_candidates += len(cands) - 1
                self._accept(block, post, now, out)
                return
            self.stats.rejections[verdict.value] += 1

    def _accept(self, block: Block, post, now: float, out: list) -> None:
        for label, verdict in append_block(self.chain, block, post):
            if verdict.accepted:
                self.stats.joins_enrolled += 1
            else:
                self.stats.join_rejections[verdict.failure.value] += 1
        h = block.height
        self.stats.accepted += 1
        self.accept_times[h] = now
        self.candidates.pop(h, None)
        self._prune_pools(block)
        if self.tpm is not None and h + 1 <= self.params.target_height:
            out.append(Timer(now + self.params.block_interval_ms, TimeoutFire(h + 1, 0)))
        if self.adversary is not None:
            out.extend(self.adversary.on_accept(self, block, now))
        for oh in sorted(k for k in self.orphans if k <= h + 1):
            for orphan in self.orphans.pop(oh):
                self._receive_block(orphan, now, out, forward=True)

    def _prune_pools(self, block: Block) -> None:
        for tx in block.transactions:
            self.mempool.pop(tx.digest, None)
        state = self.chain.world_state
        stale = [d for d, tx in self.mempool.items() if tx.nonce < state.account(tx.sender).nonce]
        for d in stale:
            del self.mempool[d]
        for req in block.join_requests:
            self.join_pool.pop(req.digest, None)
        for d in [d for d, r in self.join_pool.items() if r.label in self.chain.miner_list]:
            del self.join_pool[d]

    # -- production ---------------------------------------------------------
    def select_transactions(self) -> list[Transaction]:
        """Mempool in arrival order, gated so each sender's nonces stay contiguous."""
        cap = self.params.workload.max_txs_per_block
        state = self.chain.world_state
        expected: dict[bytes, int] = {}
        chosen: list[Transaction] = []
        pending = list(self.mempool.values())
        progress = True
        while progress and pending and len(chosen) < cap:
            progress = False
            rest = []
            for tx in pending:
                s = tx.sender
                n = expected[s] if s in expected else state.account(s).nonce
                if tx.nonce == n and len(chosen) < cap:
                    chosen.append(tx)
                    expected[s] = n + 1
                    progress = True
                elif tx.nonce > n:
                    rest.append(tx)
            pending = rest
        return chosen

    def _on_timeout(self, height: int, k: int, now: float, out: list) -> None:
        if height != self.chain.height + 1 or height > self.params.target_height:
            return  # height already filled, or past the target
        if not self.enrolled:
            return
        out.append(Timer(now + self.params.election_timeout_ms, TimeoutFire(height, k + 1)))
        if self.chain.election_mode == ElectionMode.VRF:
            if k == 0:
                election, fallback = ElectionMode.VRF, 0
            elif self.candidates.get(height):
                return  # the round had a winner; it is still inside the candidate window
            else:
                election, fallback = ElectionMode.ROUND_ROBIN, k - 1
        else:
            election, fallback = ElectionMode.ROUND_ROBIN, k
        try:
            block = produce_block(self.context(), height, self.select_transactions(),
                                  list(self.join_pool.values()), election=election, fallback=fallback)
        except NotElected:
            return
        self.stats.produced += 1
        self._publish(block, now, out)

    def _publish(self, block: Block, now: float, out: list) -> None:
        emissions = [(0.0, block, True)]
        if self.adversary is not None:
            emissions = self.adversary.transform(self, block, now)
        for delay, b, self_accept in emissions:
            payload = b.encode()
            self.seen.add(sha256(payload))
            out.append(Send(GossipBlock(payload), delay=delay))
            if not self_accept:
                continue
            if self._is_vrf_candidate(b):
                self._add_candidate(b, now, out)
                continue
            # the producer already executed; applying its own results needs no re-execution
            verdict, post = check_block(self.chain, b)
            if verdict is Verdict.ACCEPTED:
                self._accept(b, post, now, out)
            else:
                log.info("node %d: own block at height %d fails validation: %s",
                         self.node_id, b.height, verdict.value)


def node_step(node: Node, message, now: float) -> tuple[Node, list]:
    """Deliver ``message`` at simulated time ``now``.

    The node object is updated in place and returned with the outbound
    :class:`Send` / :class:`Timer` actions, which the event loop schedules.
    """
    return node, node.step(message, now)
