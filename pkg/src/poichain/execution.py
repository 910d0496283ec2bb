"""Single Execution Model ledger.

The elected miner runs :func:`execute_transactions` and ships one
:class:`ExecutionResult` per transaction inside the block.  Everyone else runs
:func:`apply_results`, which writes the recorded deltas verbatim with no
signature, nonce or balance checks.

World-state keys::

    acct/<32-byte address>            -> u64 balance || u64 nonce
    ctr/<contract id>/<storage key>   -> contract-defined bytes
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping, Optional, Sequence, Union

from . import codec
from .crypto import DIGEST_SIZE, PUBLIC_SIZE, SIGNATURE_SIZE, KeyPair, CryptoError, sha256, sign, verify
from .merkle import merkle_root
from .offchain import OffchainClient, OffchainUnavailable

ACCOUNT_PREFIX = b"acct/"
CONTRACT_PREFIX = b"ctr/"
MAX_DRAW = 1024

COUNTER = "counter"
RANDOM_DRAW = "random_draw"
ORACLE_FETCH = "oracle_fetch"


class ExecutionError(Exception):
    pass


class ContractRejected(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class ExecutionCounter:
    """Per-node count of transactions this node actually executed."""

    def __init__(self):
        self.count = 0


def account_key(address: bytes) -> bytes:
    return ACCOUNT_PREFIX + address


def contract_key(contract_id: str, name: bytes) -> bytes:
    return CONTRACT_PREFIX + contract_id.encode() + b"/" + name


def check_key(key: bytes) -> None:
    if key.startswith(ACCOUNT_PREFIX):
        if len(key) != len(ACCOUNT_PREFIX) + DIGEST_SIZE:
            raise ExecutionError(f"malformed account key {key!r}")
        return
    if key.startswith(CONTRACT_PREFIX):
        cid, sep, name = key[len(CONTRACT_PREFIX):].partition(b"/")
        if cid and sep and name:
            return
    raise ExecutionError(f"malformed state key {key!r}")


@dataclass(frozen=True)
class Account:
    address: bytes
    balance: int = 0
    nonce: int = 0

    def encode_value(self) -> bytes:
        return codec.u64(self.balance) + codec.u64(self.nonce)

    @classmethod
    def from_value(cls, address: bytes, value: Optional[bytes]) -> "Account":
        if value is None:
            return cls(address)
        if len(value) != 16:
            raise ExecutionError("account value must be 16 bytes")
        return cls(address, codec.read_u64(value[:8]), codec.read_u64(value[8:]))


# -- transactions -----------------------------------------------------------

@dataclass(frozen=True)
class Transfer:
    to: bytes
    amount: int

    def encode(self) -> bytes:
        return codec.encode(b"transfer", self.to, codec.u64(self.amount))


@dataclass(frozen=True)
class ContractCall:
    contract_id: str
    method: str
    args: bytes = b""

    def encode(self) -> bytes:
        return codec.encode(b"call", codec.text(self.contract_id), codec.text(self.method), self.args)


TxKind = Union[Transfer, ContractCall]


def _decode_kind(data: bytes) -> TxKind:
    fields = codec.decode(data)
    if fields and fields[0] == b"transfer" and len(fields) == 3:
        return Transfer(codec.fixed(fields[1], DIGEST_SIZE, "recipient"), codec.read_u64(fields[2]))
    if fields and fields[0] == b"call" and len(fields) == 4:
        return ContractCall(codec.read_text(fields[1]), codec.read_text(fields[2]), fields[3])
    raise codec.CodecError("unknown transaction kind")


@dataclass(frozen=True)
class Transaction:
    sender_public_key: bytes
    nonce: int
    kind: TxKind
    signature: bytes

    @classmethod
    def create(cls, wallet: KeyPair, nonce: int, kind: TxKind) -> "Transaction":
        unsigned = cls(wallet.public, nonce, kind, b"")
        return cls(wallet.public, nonce, kind, sign(wallet.secret, unsigned.signing_bytes()))

    def signing_bytes(self) -> bytes:
        return codec.encode(self.sender_public_key, codec.u64(self.nonce), self.kind.encode())

    def encode(self) -> bytes:
        return codec.encode(self.sender_public_key, codec.u64(self.nonce), self.kind.encode(),
                            self.signature)

    @classmethod
    def decode(cls, data: bytes) -> "Transaction":
        pk, nonce, kind, sig = codec.decode(data, 4)
        return cls(codec.fixed(pk, PUBLIC_SIZE, "sender key"), codec.read_u64(nonce),
                   _decode_kind(kind), codec.fixed(sig, SIGNATURE_SIZE, "signature"))

    @cached_property
    def digest(self) -> bytes:
        return sha256(self.encode())

    @property
    def sender(self) -> bytes:
        return sha256(self.sender_public_key)

    def verify(self) -> bool:
        try:
            return verify(self.sender_public_key, self.signing_bytes(), self.signature)
        except CryptoError:
            return False


# -- results ----------------------------------------------------------------

Delta = tuple[tuple[bytes, bytes], ...]


@dataclass(frozen=True)
class ExecutionResult:
    status: str  # "ok" or "rejected:<reason>"
    state_delta: Delta = ()
    consumed_randomness: Optional[bytes] = None
    offchain_record: Optional[tuple[bytes, bytes]] = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def reason(self) -> Optional[str]:
        return None if self.ok else self.status.partition(":")[2]

    @classmethod
    def rejected(cls, reason: str, **kw) -> "ExecutionResult":
        return cls(f"rejected:{reason}", (), **kw)

    def encode(self) -> bytes:
        delta = codec.encode_list(codec.encode(k, v) for k, v in self.state_delta)
        record = None if self.offchain_record is None else codec.encode(*self.offchain_record)
        return codec.encode(codec.text(self.status), delta,
                            codec.optional(self.consumed_randomness), codec.optional(record))

    @classmethod
    def decode(cls, data: bytes) -> "ExecutionResult":
        status, delta, rnd, rec = codec.decode(data, 4)
        pairs = tuple(tuple(codec.decode(e, 2)) for e in codec.decode(delta))
        raw_rec = codec.read_optional(rec)
        record = None if raw_rec is None else tuple(codec.decode(raw_rec, 2))
        st = codec.read_text(status)
        if st != "ok" and not st.startswith("rejected:"):
            raise codec.CodecError(f"bad result status {st!r}")
        return cls(st, pairs, codec.read_optional(rnd), record)


# -- world state ------------------------------------------------------------

class WorldState:
    """Immutable key/value snapshot; applying a delta yields a new snapshot."""

    def __init__(self, entries: Mapping[bytes, bytes] = None):
        self._entries = dict(entries or {})

    @classmethod
    def from_balances(cls, balances: Mapping[bytes, int]) -> "WorldState":
        return cls({account_key(a): Account(a, b).encode_value() for a, b in balances.items()})

    def get(self, key: bytes) -> Optional[bytes]:
        return self._entries.get(key)

    def account(self, address: bytes) -> Account:
        return Account.from_value(address, self._entries.get(account_key(address)))

    def items(self) -> list[tuple[bytes, bytes]]:
        return sorted(self._entries.items())

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, WorldState) and self._entries == other._entries

    @cached_property
    def root(self) -> bytes:
        return merkle_root([codec.encode(k, v) for k, v in self.items()])

    def apply(self, deltas: Iterable[Iterable[tuple[bytes, bytes]]]) -> "WorldState":
        entries = dict(self._entries)
        for delta in deltas:
            for key, value in delta:
                check_key(key)
                entries[key] = value
        return WorldState(entries)

    def total_balance(self) -> int:
        return sum(Account.from_value(k[len(ACCOUNT_PREFIX):], v).balance
                   for k, v in self._entries.items() if k.startswith(ACCOUNT_PREFIX))


class _Overlay:
    """Write buffer over a snapshot, used while executing one block."""

    def __init__(self, base: WorldState):
        self.base = base
        self.writes: dict[bytes, bytes] = {}

    def get(self, key: bytes) -> Optional[bytes]:
        if key in self.writes:
            return self.writes[key]
        return self.base.get(key)

    def account(self, address: bytes) -> Account:
        return Account.from_value(address, self.get(account_key(address)))

    def commit(self, delta: Delta) -> None:
        for k, v in delta:
            self.writes[k] = v


# -- built-in contracts -----------------------------------------------------

def contract_counter(state, args: bytes) -> Delta:
    key = contract_key(COUNTER, args or b"value")
    raw = state.get(key)
    value = 0 if raw is None else codec.read_u64(raw)
    return ((key, codec.u64(value + 1)),)


def _split_args(args: bytes) -> tuple[bytes, bytes]:
    try:
        name, payload = codec.decode(args, 2)
    except codec.CodecError:
        raise ContractRejected("bad_args") from None
    if not name:
        raise ContractRejected("bad_args")
    return name, payload


def contract_random_draw(state, args: bytes, tpm) -> tuple[Delta, bytes]:
    name, raw_n = _split_args(args)
    try:
        n = codec.read_u64(raw_n)
    except codec.CodecError:
        raise ContractRejected("bad_args") from None
    if n > MAX_DRAW:
        raise ContractRejected("bad_args")
    drawn = tpm.get_random(n)
    return ((contract_key(RANDOM_DRAW, name), drawn),), drawn


def contract_oracle_fetch(state, args: bytes, offchain: OffchainClient) -> tuple[Delta, tuple[bytes, bytes]]:
    name, request = _split_args(args)
    try:
        response = offchain.call(request)
    except OffchainUnavailable:
        raise ContractRejected("offchain_unavailable") from None
    return ((contract_key(ORACLE_FETCH, name), response),), (request, response)


def random_draw_args(name: bytes, n: int) -> bytes:
    return codec.encode(name, codec.u64(n))


def oracle_args(name: bytes, request: bytes) -> bytes:
    return codec.encode(name, request)


# -- execution --------------------------------------------------------------

def _execute_one(work: _Overlay, tx: Transaction, tpm, offchain) -> ExecutionResult:
    if not tx.verify():
        return ExecutionResult.rejected("bad_signature")
    sender = work.account(tx.sender)
    if tx.nonce != sender.nonce:
        return ExecutionResult.rejected("bad_nonce")

    kind = tx.kind
    if isinstance(kind, Transfer):
        if kind.amount > sender.balance:
            return ExecutionResult.rejected("insufficient_balance")
        debited = Account(sender.address, sender.balance - kind.amount, sender.nonce + 1)
        if kind.to == sender.address:
            credited = Account(sender.address, sender.balance, sender.nonce + 1)
            return ExecutionResult("ok", ((account_key(sender.address), credited.encode_value()),))
        recipient = work.account(kind.to)
        credited = Account(recipient.address, recipient.balance + kind.amount, recipient.nonce)
        return ExecutionResult("ok", ((account_key(sender.address), debited.encode_value()),
                                      (account_key(recipient.address), credited.encode_value())))

    bumped = ((account_key(sender.address),
               Account(sender.address, sender.balance, sender.nonce + 1).encode_value()),)
    randomness = record = None
    try:
        if kind.contract_id == COUNTER and kind.method == "increment":
            delta = contract_counter(work, kind.args)
        elif kind.contract_id == RANDOM_DRAW and kind.method == "draw":
            delta, randomness = contract_random_draw(work, kind.args, tpm)
        elif kind.contract_id == ORACLE_FETCH and kind.method == "fetch":
            delta, record = contract_oracle_fetch(work, kind.args, offchain)
        else:
            return ExecutionResult.rejected("unknown_contract")
    except ContractRejected as exc:
        return ExecutionResult.rejected(exc.reason)
    return ExecutionResult("ok", bumped + delta, randomness, record)


def execute_transactions(pre_state: WorldState, txs: Sequence[Transaction], tpm,
                         offchain: Optional[OffchainClient],
                         counter: Optional[ExecutionCounter] = None
                         ) -> tuple[list[ExecutionResult], WorldState, bytes]:
    """Execute ``txs`` in order.  Per-transaction failures become rejected results."""
    work = _Overlay(pre_state)
    results = []
    for tx in txs:
        if counter is not None:
            counter.count += 1
        res = _execute_one(work, tx, tpm, offchain)
        work.commit(res.state_delta)
        results.append(res)
    post = pre_state.apply(r.state_delta for r in results)
    return results, post, post.root


def apply_results(pre_state: WorldState, txs: Sequence[Transaction],
                  results: Sequence[ExecutionResult]) -> tuple[WorldState, bytes]:
    if len(results) != len(txs):
        raise ExecutionError(f"{len(txs)} transactions but {len(results)} results")
    post = pre_state.apply(r.state_delta for r in results)
    return post, post.root


class _RecordedRandomness:
    def __init__(self, value: Optional[bytes]):
        self.value = value

    def get_random(self, n: int) -> bytes:
        if self.value is None or len(self.value) != n:
            raise ExecutionError("recorded randomness does not match the draw")
        return self.value


class _RecordedOffchain:
    def __init__(self, record: Optional[tuple[bytes, bytes]]):
        self.record = record
        self.calls = 0

    def call(self, request: bytes) -> bytes:
        if self.record is None:
            raise OffchainUnavailable("executor recorded no response")
        if self.record[0] != request:
            raise ExecutionError("recorded off-chain request does not match")
        return self.record[1]


def reexecute(pre_state: WorldState, txs: Sequence[Transaction], results: Sequence[ExecutionResult],
              counter: Optional[ExecutionCounter] = None) -> Optional[WorldState]:
    """Everyone-executes baseline: recompute every result and compare.

    Randomness and off-chain responses cannot be reproduced on another node,
    so those two inputs are taken from the block's recorded values.  Returns
    the post-state, or None on any disagreement.
    """
    if len(results) != len(txs):
        return None
    work = _Overlay(pre_state)
    for tx, claimed in zip(txs, results):
        if counter is not None:
            counter.count += 1
        try:
            mine = _execute_one(work, tx, _RecordedRandomness(claimed.consumed_randomness),
                                _RecordedOffchain(claimed.offchain_record))
        except ExecutionError:
            return None
        if mine != claimed:
            return None
        work.commit(mine.state_delta)
    return pre_state.apply(r.state_delta for r in results)
