"""Discrete-event loop over a full mesh of simulated nodes."""

from __future__ import annotations

import hashlib
import heapq
import logging
import random
from dataclasses import dataclass
from typing import Optional

from ..attestation import Failure
from ..blocks import ElectionMode
from ..consensus import Verdict
from ..crypto import derive_seed, issue_certificate, sha256
from ..genesis import Fixtures, booted_tpm, build_fixtures, make_join_request, tampered_manifest
from ..offchain import FaultInjectingClient, FixtureClient
from .adversary import make_adversary, rogue_authority
from .metrics import Metrics
from .node import Node, node_step
from .params import (
    AdversaryKind,
    CandidateWindowClose,
    ConfigError,
    NodeRole,
    Send,
    SimParams,
    SubmitJoin,
    TimeoutFire,
    Timer,
)
from .workload import generate_workload

log = logging.getLogger(__name__)

CLIENT = -1  # source id for externally injected messages


def _seed_int(seed: int, purpose: str) -> int:
    return int.from_bytes(derive_seed("sim", purpose, seed)[:8], "big")


def scenario_fixtures(params: SimParams) -> Fixtures:
    if params.fixtures is not None:
        return params.fixtures
    return build_fixtures(derive_seed("sim/fixtures", params.seed), params.n_miners,
                          n_candidates=params.n_candidates, n_wallets=params.workload.wallets,
                          election_mode=params.election_mode)


@dataclass
class SimResult:
    params: SimParams
    nodes: list[Node]
    metrics: Metrics
    transcript_hash: str

    @property
    def chains(self):
        return [n.chain for n in self.nodes]

    def honest_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.is_honest]

    def reference(self) -> Node:
        return self.honest_nodes()[0]

    @property
    def converged(self) -> bool:
        return bool(self.metrics.network["converged"])

    def adversary_report(self) -> list[dict]:
        """Per adversary: items emitted and, per honest node, rejections with the expected verdict."""
        out = []
        for n in self.nodes:
            if n.adversary is None:
                continue
            expected = n.adversary.expected_verdict
            joins = n.adversary.targets_joins
            emitted = n.stats.malicious_joins if joins else n.stats.malicious_blocks
            rejected = {}
            for h in self.honest_nodes():
                counts = h.stats.join_rejections if joins else h.stats.rejections
                rejected[h.node_id] = counts.get(expected, 0)
            out.append({"node": n.node_id, "kind": n.adversary.kind.value, "expected_verdict": expected,
                        "emitted": emitted, "rejected_by_node": rejected,
                        "all_rejected": emitted > 0 and all(v == emitted for v in rejected.values())})
        return out


class _Network:
    def __init__(self, params: SimParams, n_nodes: int):
        self.params = params
        self.n_nodes = n_nodes
        self.rng = random.Random(_seed_int(params.seed, "network"))
        self.queue: list = []
        self.seq = 0
        self.bytes_on_wire = 0
        self.messages_sent = 0
        self.drops = 0
        self.retransmits = 0

    def push(self, at: float, src: int, dst: int, message) -> None:
        heapq.heappush(self.queue, (at, self.seq, src, dst, message))
        self.seq += 1

    def transmit(self, now: float, src: int, dst: int, message, size: int) -> None:
        """Per-link delivery: each lost attempt is retried after 3x the max latency."""
        p = self.params
        at = now
        self.messages_sent += 1
        self.bytes_on_wire += size
        while p.drop_rate and self.rng.random() < p.drop_rate:
            self.drops += 1
            self.retransmits += 1
            self.bytes_on_wire += size
            at += 3 * p.latency_max_ms
        at += self.rng.uniform(p.latency_min_ms, p.latency_max_ms)
        self.push(at, src, dst, message)


def _payload(message) -> bytes:
    return getattr(message, "payload", b"")


def _describe(message) -> str:
    if isinstance(message, TimeoutFire):
        return f"timeout:{message.height}:{message.k}"
    if isinstance(message, CandidateWindowClose):
        return f"window:{message.height}"
    return f"{type(message).__name__}:{sha256(_payload(message)).hex()[:16]}"


def build_nodes(params: SimParams, fixtures: Fixtures) -> tuple[list[Node], list[tuple[float, int, SubmitJoin]]]:
    genesis, keys = fixtures.genesis, fixtures.keys
    if ElectionMode(genesis.election_mode) != ElectionMode(params.election_mode):
        raise ConfigError(f"election_mode {ElectionMode(params.election_mode).value!r} does not match "
                          f"the genesis config ({ElectionMode(genesis.election_mode).value!r})")
    roster = params.roster()
    if params.n_miners > len(keys.miners):
        raise ConfigError(f"roster needs {params.n_miners} genesis miners, key file has {len(keys.miners)}")
    if params.n_candidates > len(keys.candidates):
        raise ConfigError(f"roster needs {params.n_candidates} join candidates, "
                          f"key file has {len(keys.candidates)}")
    if params.workload.wallets > len(keys.wallets):
        raise ConfigError(f"workload needs {params.workload.wallets} wallets, key file has {len(keys.wallets)}")
    if params.n_miners != len(genesis.miners):
        raise ConfigError(f"n_miners is {params.n_miners} but the genesis config enrols {len(genesis.miners)}")

    table = dict(params.workload.oracle_fixtures)
    nodes, joins = [], []
    for node_id, spec in enumerate(roster):
        chain = genesis.initial_state()
        adversary = None if spec.adversary is None else make_adversary(spec.adversary, params)
        if spec.role == NodeRole.UNTRUSTED_RELAY:
            nodes.append(Node(node_id, spec, chain, params, adversary=adversary))
            continue
        mk = keys.candidates[spec.key_index] if spec.is_joiner else keys.miners[spec.key_index]
        manifest = tampered_manifest() if spec.adversary == AdversaryKind.TAMPERED_PCR_MINER else mk.manifest
        tpm = booted_tpm(mk.tpm_seed, manifest)
        offchain = FaultInjectingClient(FixtureClient(table), params.workload.oracle_faults)
        node = Node(node_id, spec, chain, params, tpm=tpm, offchain=offchain, adversary=adversary)
        nodes.append(node)
        if spec.is_joiner:
            cert = mk.certificate
            if spec.adversary == AdversaryKind.FORGED_CERT_JOIN:
                rogue = rogue_authority(params.seed)
                cert = issue_certificate(rogue.secret, rogue.label, tpm.attestation_public_key)
            req = make_join_request(tpm, cert, int(spec.join_at_ms))
            joins.append((spec.join_at_ms, node_id, SubmitJoin(req.encode(), external=True)))
    return nodes, joins


def run_scenario(params: SimParams, max_events: Optional[int] = None) -> SimResult:
    """Run the scenario until the event queue drains and collect metrics."""
    params.validate()
    fixtures = scenario_fixtures(params)
    nodes, joins = build_nodes(params, fixtures)
    net = _Network(params, len(nodes))

    if params.target_height >= 1:
        for n in nodes:
            if n.tpm is not None:
                net.push(params.block_interval_ms, n.node_id, n.node_id, TimeoutFire(1, 0))
    for at, node_id, msg in joins:
        net.push(at, CLIENT, node_id, msg)
    entry_nodes = [n.node_id for n in nodes if n.is_honest]
    workload_rng = random.Random(_seed_int(params.seed, "workload"))
    for at, node_id, msg in generate_workload(params, fixtures.keys.wallets, entry_nodes, workload_rng):
        net.push(at, CLIENT, node_id, msg)

    transcript = hashlib.sha256()
    now = 0.0
    events = 0
    while net.queue:
        now, seq, src, dst, message = heapq.heappop(net.queue)
        events += 1
        if max_events is not None and events > max_events:
            raise RuntimeError(f"event budget of {max_events} exhausted at t={now}")
        transcript.update(f"{now!r}|{seq}|{src}|{dst}|{_describe(message)}\n".encode())
        node = nodes[dst]
        node, outbound = node_step(node, message, now)
        for action in outbound:
            if isinstance(action, Timer):
                net.push(action.at, dst, dst, action.message)
            elif isinstance(action, Send):
                size = len(_payload(action.message))
                targets = range(len(nodes)) if action.dest is None else (action.dest,)
                for peer in targets:
                    if peer != dst:
                        net.transmit(now + action.delay, dst, peer, action.message, size)
            else:
                raise TypeError(f"unknown outbound action {action!r}")

    metrics = collect_metrics(params, nodes, net, now, transcript.hexdigest())
    return SimResult(params, nodes, metrics, transcript.hexdigest())


def fork_count(chains) -> int:
    """Heights at which two honest chains hold different blocks."""
    if not chains:
        return 0
    common = min(c.height for c in chains)
    return sum(1 for h in range(common + 1) if len({c.blocks[h].hash for c in chains}) > 1)


def collect_metrics(params: SimParams, nodes: list[Node], net: _Network, end_time: float,
                    transcript_hash: str) -> Metrics:
    honest = [n for n in nodes if n.is_honest]
    ref = honest[0].chain
    m = Metrics()
    for n in nodes:
        row = {
            "role": n.spec.role.value,
            "honest": n.is_honest,
            "adversary": n.spec.adversary.value if n.spec.adversary else "none",
            "height": n.chain.height,
            "tip_hash": n.chain.tip_hash.hex(),
            "state_root": n.chain.world_state.root.hex(),
            "miners_known": len(n.chain.miner_list),
            "executions": n.counter.count,
            "produced": n.stats.produced,
            "accepted": n.stats.accepted,
            "duplicates": n.stats.duplicates,
            "malformed": n.stats.malformed,
            "orphans": n.stats.orphans,
            "superseded_candidates": n.stats.superseded_candidates,
            "joins_enrolled": n.stats.joins_enrolled,
            "malicious_blocks": n.stats.malicious_blocks,
            "malicious_joins": n.stats.malicious_joins,
            "offchain_calls": 0 if n.offchain is None else n.offchain.calls,
        }
        for v in Verdict:
            if v is not Verdict.ACCEPTED:
                row[f"rejected.{v.value}"] = n.stats.rejections.get(v.value, 0)
        for f in Failure:
            if f is not Failure.NONE:
                row[f"join_rejected.{f.value}"] = n.stats.join_rejections.get(f.value, 0)
        m.nodes[n.node_id] = row

    blocks = ref.blocks[1:]
    vrf_chain = ref.election_mode == ElectionMode.VRF
    ratios, tx_bytes, res_bytes, hdr_bytes = [], 0, 0, 0
    for b in blocks:
        t, r, hd = len(b.tx_section()), len(b.results_section()), len(b.header.encode())
        tx_bytes += t
        res_bytes += r
        hdr_bytes += hd
        if b.transactions:
            ratios.append(r / (hd + t))
    empty_vrf = sum(1 for b in blocks if vrf_chain and b.header.election_mode == ElectionMode.ROUND_ROBIN)
    fallback = sum(1 for b in blocks if b.header.fallback > 0
                   or (vrf_chain and b.header.election_mode == ElectionMode.ROUND_ROBIN))
    honest_chains = [n.chain for n in honest]
    converged = (all(c.height == params.target_height for c in honest_chains)
                 and len({c.tip_hash for c in honest_chains}) == 1)
    oracle_txs = sum(1 for b in blocks for tx in b.transactions
                     if getattr(tx.kind, "contract_id", None) == "oracle_fetch")
    m.network = {
        "seed": params.seed,
        "election_mode": ElectionMode(params.election_mode).value,
        "paranoid_validation": params.paranoid_validation,
        "nodes": len(nodes),
        "target_height": params.target_height,
        "final_height": ref.height,
        "final_chain_hash": ref.tip_hash.hex(),
        "final_state_root": ref.world_state.root.hex(),
        "converged": converged,
        "fork_count": fork_count(honest_chains),
        "reorg_count": 0,  # append-only chains: a reorg would raise inside append_block
        "empty_vrf_rounds": empty_vrf,
        "fallback_rounds": fallback,
        "transactions": sum(len(b.transactions) for b in blocks),
        "executions_total": sum(n.counter.count for n in nodes),
        "offchain_requests": sum(0 if n.offchain is None else n.offchain.calls for n in nodes),
        "oracle_transactions": oracle_txs,
        "header_bytes": hdr_bytes,
        "tx_section_bytes": tx_bytes,
        "results_section_bytes": res_bytes,
        "blocks_with_txs": len(ratios),
        "block_overhead": (sum(ratios) / len(ratios)) if ratios else 0.0,
        "bytes_on_wire": net.bytes_on_wire,
        "messages_sent": net.messages_sent,
        "drops": net.drops,
        "retransmits": net.retransmits,
        "sim_time_ms": end_time,
        "transcript_hash": transcript_hash,
    }
    return m

