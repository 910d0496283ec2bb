"""Scenario parameters and the wire messages exchanged by simulated nodes."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from ..blocks import ElectionMode


class ConfigError(ValueError):
    pass


class NodeRole(str, Enum):
    TRUSTED_MINER = "trusted_miner"
    UNTRUSTED_RELAY = "untrusted_relay"


class AdversaryKind(str, Enum):
    FORGED_CERT_JOIN = "forged_cert_join"
    TAMPERED_PCR_MINER = "tampered_pcr_miner"
    QUOTE_REPLAY_BLOCK = "quote_replay_block"
    EQUIVOCATING_MINER = "equivocating_miner"
    SPAM_INVALID_BLOCKS = "spam_invalid_blocks"


@dataclass(frozen=True)
class NodeSpec:
    """One roster slot.

    A trusted miner either starts in the genesis miner list (``key_index``
    into the genesis miners) or joins later (``join_at_ms`` set, ``key_index``
    into the join candidates).
    """

    role: NodeRole
    key_index: Optional[int] = None
    join_at_ms: Optional[float] = None
    adversary: Optional[AdversaryKind] = None

    @property
    def is_joiner(self) -> bool:
        return self.join_at_ms is not None


@dataclass(frozen=True)
class WorkloadSpec:
    txs_per_block: int = 1
    wallets: int = 16
    # (kind, weight); kinds: transfer, counter, random_draw, oracle_fetch
    mix: tuple[tuple[str, float], ...] = (("transfer", 1.0),)
    max_amount: int = 100
    draw_bytes: int = 16
    oracle_fixtures: tuple[tuple[bytes, bytes], ...] = ()
    oracle_faults: tuple[bytes, ...] = ()
    max_txs_per_block: int = 1000

    KINDS = ("transfer", "counter", "random_draw", "oracle_fetch")

    def validate(self) -> None:
        if self.txs_per_block < 0 or self.wallets < 1:
            raise ConfigError("workload: txs_per_block must be >= 0 and wallets >= 1")
        if not self.mix or any(k not in self.KINDS or w < 0 for k, w in self.mix):
            raise ConfigError(f"workload.mix: kinds must be among {self.KINDS} with weights >= 0")
        if sum(w for _, w in self.mix) <= 0:
            raise ConfigError("workload.mix: total weight must be positive")
        if any(k == "oracle_fetch" and w > 0 for k, w in self.mix) and not (
                self.oracle_fixtures or self.oracle_faults):
            raise ConfigError("workload: oracle_fetch needs oracle_fixtures or oracle_faults")


@dataclass(frozen=True)
class AdversarySpec:
    kind: AdversaryKind
    slot: int = 0  # genesis-miner index, joiner index or relay index depending on kind


@dataclass(frozen=True)
class SimParams:
    seed: int
    n_miners: int = 4
    n_relays: int = 0
    join_times_ms: tuple[float, ...] = ()
    election_mode: ElectionMode = ElectionMode.ROUND_ROBIN
    latency_min_ms: float = 10.0
    latency_max_ms: float = 50.0
    drop_rate: float = 0.0
    block_interval_ms: float = 1000.0
    election_timeout_ms: float = 2000.0
    candidate_window_ms: float = 1000.0
    target_height: int = 10
    paranoid_validation: bool = False
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    adversaries: tuple[AdversarySpec, ...] = ()
    # Pre-built bootstrap (e.g. loaded from genesis.json / keys.json).  When
    # absent, fixtures are derived from ``seed``.
    fixtures: Optional[object] = field(default=None, compare=False, repr=False)

    def validate(self) -> None:
        if self.n_miners < 1:
            raise ConfigError("roster: at least one trusted miner is required")
        if self.n_relays < 0:
            raise ConfigError("n_relays must be >= 0")
        if not 0 <= self.latency_min_ms <= self.latency_max_ms:
            raise ConfigError("latency: need 0 <= latency_min_ms <= latency_max_ms")
        if not 0 <= self.drop_rate < 1:
            raise ConfigError("drop_rate must be in [0, 1)")
        if self.target_height < 0:
            raise ConfigError("target_height must be >= 0")
        if self.block_interval_ms <= 0 or self.election_timeout_ms <= 0 or self.candidate_window_ms <= 0:
            raise ConfigError("block_interval_ms, election_timeout_ms and candidate_window_ms must be > 0")
        if self.candidate_window_ms >= self.election_timeout_ms:
            raise ConfigError("candidate_window_ms must be shorter than election_timeout_ms")
        self.workload.validate()
        for adv in self.adversaries:
            limit = {AdversaryKind.FORGED_CERT_JOIN: None,
                     AdversaryKind.SPAM_INVALID_BLOCKS: self.n_relays}.get(adv.kind, self.n_miners)
            if limit is not None and not 0 <= adv.slot < limit:
                raise ConfigError(f"adversary {adv.kind.value}: slot {adv.slot} out of range")

    def roster(self) -> list[NodeSpec]:
        """Genesis miners, then honest joiners, then forged joiners, then relays."""
        adv_by_miner = {a.slot: a.kind for a in self.adversaries
                        if a.kind not in (AdversaryKind.FORGED_CERT_JOIN, AdversaryKind.SPAM_INVALID_BLOCKS)}
        spam = {a.slot for a in self.adversaries if a.kind == AdversaryKind.SPAM_INVALID_BLOCKS}
        roster = [NodeSpec(NodeRole.TRUSTED_MINER, i, None, adv_by_miner.get(i)) for i in range(self.n_miners)]
        roster += [NodeSpec(NodeRole.TRUSTED_MINER, j, t) for j, t in enumerate(self.join_times_ms)]
        forged = [a for a in self.adversaries if a.kind == AdversaryKind.FORGED_CERT_JOIN]
        base = len(self.join_times_ms)
        for j, a in enumerate(forged):
            at = self.block_interval_ms * (1 + a.slot) + 1
            roster.append(NodeSpec(NodeRole.TRUSTED_MINER, base + j, at, AdversaryKind.FORGED_CERT_JOIN))
        roster += [NodeSpec(NodeRole.UNTRUSTED_RELAY, r, None,
                            AdversaryKind.SPAM_INVALID_BLOCKS if r in spam else None)
                   for r in range(self.n_relays)]
        return roster

    @property
    def n_candidates(self) -> int:
        return len(self.join_times_ms) + sum(a.kind == AdversaryKind.FORGED_CERT_JOIN for a in self.adversaries)


# -- messages ---------------------------------------------------------------

@dataclass(frozen=True)
class SubmitTransaction:
    payload: bytes
    external: bool = False  # True when injected by a client rather than a peer


@dataclass(frozen=True)
class GossipBlock:
    payload: bytes


@dataclass(frozen=True)
class SubmitJoin:
    payload: bytes
    external: bool = False


@dataclass(frozen=True)
class TimeoutFire:
    height: int
    k: int


@dataclass(frozen=True)
class CandidateWindowClose:
    """Local timer: stop collecting VRF candidates for ``height``."""

    height: int


Message = object  # one of the classes above


@dataclass(frozen=True)
class Send:
    """Outbound network message; ``dest`` None means every peer."""

    message: Message
    dest: Optional[int] = None
    delay: float = 0.0


@dataclass(frozen=True)
class Timer:
    at: float
    message: Message
