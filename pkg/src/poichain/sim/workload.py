"""Seeded client workload: signed transactions injected at entry nodes."""

from __future__ import annotations

import random
from typing import Sequence

from ..crypto import KeyPair, derive_seed
from ..execution import (
    COUNTER,
    ORACLE_FETCH,
    RANDOM_DRAW,
    ContractCall,
    Transaction,
    Transfer,
    oracle_args,
    random_draw_args,
)
from .params import SimParams, SubmitTransaction


def generate_workload(params: SimParams, wallets: Sequence[KeyPair], entry_nodes: Sequence[int],
                      rng: random.Random) -> list[tuple[float, int, SubmitTransaction]]:
    """One batch of ``txs_per_block`` transactions per target block.

    Batch i is submitted at ``i * block_interval + 1`` ms to one entry node
    chosen uniformly.  Nonces are tracked here, so every transaction is valid
    when applied in submission order (transactions expected to be rejected
    are signed by one-shot keys).
    """
    spec = params.workload
    wallets = list(wallets)[:spec.wallets]
    kinds = [k for k, _ in spec.mix]
    weights = [w for _, w in spec.mix]
    requests = [r for r, _ in spec.oracle_fixtures] + list(spec.oracle_faults)
    faults = set(spec.oracle_faults)
    nonces = [0] * len(wallets)
    events = []
    serial = 0
    for i in range(params.target_height):
        at = i * params.block_interval_ms + 1
        entry = entry_nodes[rng.randrange(len(entry_nodes))]
        for _ in range(spec.txs_per_block):
            s = rng.randrange(len(wallets))
            kind = rng.choices(kinds, weights)[0]
            if kind == "transfer":
                to = wallets[rng.randrange(len(wallets))].label
                body = Transfer(to, rng.randint(1, spec.max_amount))
            elif kind == "counter":
                body = ContractCall(COUNTER, "increment", b"")
            elif kind == "random_draw":
                body = ContractCall(RANDOM_DRAW, "draw", random_draw_args(b"draw-%d" % serial, spec.draw_bytes))
            else:
                req = requests[rng.randrange(len(requests))]
                body = ContractCall(ORACLE_FETCH, "fetch", oracle_args(b"fetch-%d" % serial, req))
                if req in faults:
                    # A rejected tx leaves its sender's nonce unchanged, so calls
                    # that are known to fail come from one-shot throwaway keys.
                    events.append((at, entry, SubmitTransaction(
                        Transaction.create(KeyPair.from_seed(derive_seed("workload/fault", params.seed, serial)),
                                           0, body).encode(), external=True)))
                    serial += 1
                    continue
            tx = Transaction.create(wallets[s], nonces[s], body)
            nonces[s] += 1
            serial += 1
            events.append((at, entry, SubmitTransaction(tx.encode(), external=True)))
    return events
