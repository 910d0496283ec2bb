"""Deterministic discrete-event simulation of a mixed trusted/untrusted network."""

from .adversary import adversary_inject
from .engine import SimResult, fork_count, run_scenario
from .metrics import METRICS_SCHEMA, Metrics
from .node import Node, node_step
from .params import (
    AdversaryKind,
    AdversarySpec,
    CandidateWindowClose,
    ConfigError,
    GossipBlock,
    NodeRole,
    NodeSpec,
    SimParams,
    SubmitJoin,
    SubmitTransaction,
    TimeoutFire,
    WorkloadSpec,
)

__all__ = [
    "AdversaryKind", "AdversarySpec", "CandidateWindowClose", "ConfigError", "GossipBlock",
    "METRICS_SCHEMA", "Metrics", "Node", "NodeRole", "NodeSpec", "SimParams", "SimResult",
    "SubmitJoin", "SubmitTransaction", "TimeoutFire", "WorkloadSpec", "adversary_inject",
    "fork_count", "node_step", "run_scenario",
]
