from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from poichain.attestation import Failure, IntegrityReport, build_report
from poichain.blocks import Block, ElectionMode, JoinRequest, decode_block
from poichain.consensus import (
    ChainVerificationError,
    ConsensusError,
    MinerContext,
    MinerList,
    MinerRecord,
    NotElected,
    Verdict,
    accept_block,
    append_block,
    check_block,
    elect_round_robin,
    produce_block,
    rebuild_from_genesis,
    validate_block,
    vrf_eligibility,
    vrf_round,
)
from poichain.crypto import KeyPair, derive_seed, issue_certificate
from poichain.execution import ExecutionCounter, ExecutionResult, Transaction, Transfer
from poichain.genesis import (
    booted_tpm,
    build_fixtures,
    certificate_authority,
    honest_manifest,
    make_join_request,
    tampered_manifest,
)
from poichain.tpm import Tpm

SEED = b"consensus-tests".ljust(32, b"\0")
FIX = build_fixtures(SEED, 3, n_candidates=3, n_wallets=4)


def _tpms():
    return [m.boot() for m in FIX.keys.miners + FIX.keys.candidates]


def _ordered_tpms(state):
    by_label = {t.label: t for t in _tpms()}
    return [by_label[label] for label in state.miner_list.labels()]


def _transfer(nonce, amount=1):
    w = FIX.keys.wallets
    return Transaction.create(w[0], nonce, Transfer(w[1].label, amount))


def _grow(state, n_blocks, tx_every=1):
    tpms = _ordered_tpms(state)
    nonce = state.world_state.account(FIX.keys.wallets[0].label).nonce
    for _ in range(n_blocks):
        h = state.height + 1
        if len(tpms) != len(state.miner_list):
            tpms = _ordered_tpms(state)
        ctx = MinerContext(state, tpms[elect_round_robin(h, state.miner_list)])
        txs = []
        if h % tx_every == 0:
            txs = [_transfer(nonce)]
            nonce += 1
        assert accept_block(state, produce_block(ctx, h, txs)) is Verdict.ACCEPTED
    return state


def _next_block(state, txs=(), joins=()):
    h = state.height + 1
    tpm = _ordered_tpms(state)[elect_round_robin(h, state.miner_list)]
    return produce_block(MinerContext(state, tpm), h, txs, joins)


# -- miner list --------------------------------------------------------------

def _record(keys, height=0):
    return MinerRecord(keys.label, keys.certificate, height)


def test_miner_list_is_sorted_by_label():
    ml = MinerList(_record(m) for m in reversed(FIX.keys.miners))
    labels = sorted(m.label for m in FIX.keys.miners)
    assert ml.labels() == labels
    assert ml.index_of(labels[0]) == 0
    grown = ml.insert(_record(FIX.keys.candidates[0], 4))
    assert grown.labels() == sorted(labels + [FIX.keys.candidates[0].label])
    assert len(ml) == 3
    with pytest.raises(ConsensusError):
        ml.insert(ml[0])
    with pytest.raises(ConsensusError):
        MinerList([MinerRecord(bytes(32), FIX.keys.miners[0].certificate, 0)])


@given(st.integers(0, 10_000), st.integers(1, 50))
def test_round_robin_is_height_mod_n(h, n):
    assert elect_round_robin(h, n) == h % n


def test_round_robin_empty_list_rejected():
    with pytest.raises(ConsensusError):
        elect_round_robin(3, 0)


# -- block validation --------------------------------------------------------

def test_honest_chain_accepts_and_tracks_state():
    state = _grow(FIX.genesis.initial_state(), 6)
    assert state.height == 6
    w = FIX.keys.wallets
    assert state.world_state.account(w[1].label).balance == 1_000_000_000 + 6
    assert state.world_state.total_balance() == 4 * 1_000_000_000


def test_block_codec_roundtrip():
    state = FIX.genesis.initial_state()
    block = _next_block(state, [_transfer(0)])
    assert decode_block(block.encode()) == block
    assert decode_block(block.encode()).hash == block.hash


def test_wrong_miner_is_not_elected():
    state = FIX.genesis.initial_state()
    wrong = _ordered_tpms(state)[(1 + 1) % 3]
    with pytest.raises(NotElected):
        produce_block(MinerContext(state, wrong), 1, [])
    # bypass the producer check by asking for a fallback slot that does elect it
    block = produce_block(MinerContext(state, wrong), 1, [], fallback=1)
    assert validate_block(state, block) is Verdict.ACCEPTED
    lying = replace(block.header, fallback=0)
    lying = replace(lying, quote=wrong.quote((0, 1, 2), lying.binding_hash))
    assert validate_block(state, Block(lying, (), (), ())) is Verdict.NOT_ELECTED


def test_unknown_miner_rejected():
    state = FIX.genesis.initial_state()
    outsider = booted_tpm(derive_seed("outsider"), honest_manifest())
    block = _next_block(state)
    header = replace(block.header, miner_label=outsider.label)
    header = replace(header, quote=outsider.quote((0, 1, 2), header.binding_hash))
    assert validate_block(state, Block(header, (), (), ())) is Verdict.UNKNOWN_MINER


def test_quote_checks():
    state = FIX.genesis.initial_state()
    block = _next_block(state)
    q = block.header.quote
    no_quote = Block(replace(block.header, quote=None), (), (), ())
    assert validate_block(state, no_quote) is Verdict.BAD_QUOTE
    bad_sig = replace(q, signature=bytes(64))
    assert validate_block(state, Block(replace(block.header, quote=bad_sig), (), (), ())) is Verdict.BAD_QUOTE
    unlisted = replace(q, pcr_composite=bytes(32))
    assert validate_block(state, Block(replace(block.header, quote=unlisted), (), (), ())) \
        is Verdict.INTEGRITY_NOT_LISTED
    # a valid quote over different header contents: qualifying data mismatch
    other = _next_block(state, [_transfer(0)])
    moved = Block(replace(block.header, quote=other.header.quote), (), (), ())
    assert validate_block(state, moved) is Verdict.BAD_QUOTE


def test_tampered_platform_blocks_not_listed():
    state = FIX.genesis.initial_state()
    h = 1
    idx = elect_round_robin(h, state.miner_list)
    label = state.miner_list[idx].label
    seed = next(m.tpm_seed for m in FIX.keys.miners if m.label == label)
    bad = booted_tpm(seed, tampered_manifest())
    block = produce_block(MinerContext(state, bad), h, [])
    assert validate_block(state, block) is Verdict.INTEGRITY_NOT_LISTED


def test_bad_roots_and_lying_results():
    state = FIX.genesis.initial_state()
    block = _next_block(state, [_transfer(0)])
    wrong_results = (ExecutionResult.rejected("bad_nonce"),)
    assert validate_block(state, Block(block.header, block.transactions, wrong_results, ())) \
        is Verdict.BAD_ROOTS
    assert validate_block(state, Block(block.header, (), (), ())) is Verdict.BAD_ROOTS


def test_stale_and_equivocation():
    state = _grow(FIX.genesis.initial_state(), 2)
    old = state.blocks[2]
    assert validate_block(state, old) is Verdict.STALE
    # same elected miner signs a second block for the filled height 2
    twin_state = _grow(FIX.genesis.initial_state(), 1)
    twin = _next_block(twin_state, [_transfer(1, 99)])
    assert twin.header.miner_label == old.header.miner_label and twin.hash != old.hash
    assert validate_block(state, twin) is Verdict.EQUIVOCATION
    # a block that skips ahead has no parent here
    ahead_state = _grow(FIX.genesis.initial_state(), 3)
    assert validate_block(state, _next_block(ahead_state)) is Verdict.STALE


def test_append_out_of_order_rejected():
    state = FIX.genesis.initial_state()
    block = _next_block(state)
    with pytest.raises(ConsensusError):
        append_block(_grow(FIX.genesis.initial_state(), 1), block, state.world_state)


def test_validators_do_not_execute_unless_paranoid():
    state = FIX.genesis.initial_state()
    block = _next_block(state, [_transfer(0), _transfer(1)])
    c = ExecutionCounter()
    assert check_block(state, block, counter=c)[0] is Verdict.ACCEPTED
    assert c.count == 0
    assert check_block(state, block, paranoid=True, counter=c)[0] is Verdict.ACCEPTED
    assert c.count == 2


# -- joins -------------------------------------------------------------------

def _candidate(i):
    return FIX.keys.candidates[i]


def _join_and_check(state, req):
    block = _next_block(state, joins=[req])
    assert accept_block(state, block) is Verdict.ACCEPTED
    return state.join_log[-1][2]


def test_honest_join_enrolls_from_next_height():
    state = FIX.genesis.initial_state()
    cand = _candidate(0)
    req = make_join_request(cand.boot(), cand.certificate, 1)
    assert _join_and_check(state, req) is Failure.NONE
    assert len(state.miner_list) == 4
    assert state.miner_list.get(req.label).join_height == 1
    # the enlarged list now drives the round-robin schedule
    _grow(state, 8)
    producers = {b.header.miner_label for b in state.blocks[2:]}
    assert req.label in producers


def test_sybil_joins_rejected():
    state = FIX.genesis.initial_state()
    cand = _candidate(1)
    tpm = cand.boot()
    rogue = KeyPair.from_seed(derive_seed("rogue-ca"))
    forged = issue_certificate(rogue.secret, certificate_authority(SEED).label, tpm.attestation_public_key)
    assert _join_and_check(state, make_join_request(tpm, forged, 1)) is Failure.BAD_CERTIFICATE

    fresh = cand.boot()
    self_signed = issue_certificate(rogue.secret, tpm.label, tpm.attestation_public_key)
    assert _join_and_check(state, make_join_request(fresh, self_signed, 2)) is Failure.BAD_CERTIFICATE

    # another candidate's certificate with a quote from this TPM
    other = _candidate(2)
    stolen = make_join_request(cand.boot(), cand.certificate, 3)
    spliced = JoinRequest(IntegrityReport(stolen.report.quote, other.certificate, stolen.report.event_log), 3)
    assert _join_and_check(state, spliced) is Failure.BAD_SIGNATURE

    # replayed report re-dated: quote no longer binds the payload
    old = make_join_request(cand.boot(), cand.certificate, 4)
    assert _join_and_check(state, JoinRequest(old.report, 5)) is Failure.BAD_QUALIFYING_DATA

    tampered = booted_tpm(cand.tpm_seed, tampered_manifest())
    assert _join_and_check(state, make_join_request(tampered, cand.certificate, 6)) \
        is Failure.INTEGRITY_NOT_LISTED

    no_log = make_join_request(cand.boot(), cand.certificate, 7)
    report = build_report(cand.boot(), no_log.binding(), cand.certificate, include_log=False)
    assert _join_and_check(state, JoinRequest(report, 7)) is Failure.LOG_MISMATCH

    existing = FIX.genesis.miners[0]
    assert _join_and_check(state, existing) is Failure.DUPLICATE
    assert len(state.miner_list) == 3


# -- VRF ---------------------------------------------------------------------

def test_vrf_eligibility_matches_round():
    tpms = [Tpm(derive_seed("vrf-miner", i)) for i in range(5)]
    prev = derive_seed("prev")
    winners = vrf_round(tpms, prev)
    for i, t in enumerate(tpms):
        ok, out = vrf_eligibility(t, prev, i, 5)
        assert ok == any(w[0] == i for w in winners)
        assert out == t.vrf_prove(prev)
    assert [w[1].hash for w in winners] == sorted(w[1].hash for w in winners)


def test_vrf_chain_block_validates():
    fix = build_fixtures(SEED, 3, election_mode=ElectionMode.VRF)
    state = fix.genesis.initial_state()
    tpms = _ordered_tpms_for(fix, state)
    for _ in range(40):
        winners = vrf_round(tpms, state.tip_hash)
        if not winners:
            break
        idx = winners[0][0]
        block = produce_block(MinerContext(state, tpms[idx]), state.height + 1, [])
        assert block.header.vrf_output == winners[0][1]
        assert accept_block(state, block) is Verdict.ACCEPTED
    else:
        pytest.fail("no empty VRF round in 40 heights")
    # empty round: nobody is eligible, round-robin fallback is accepted
    h = state.height + 1
    for t in tpms:
        with pytest.raises(NotElected):
            produce_block(MinerContext(state, t), h, [])
    rr = tpms[elect_round_robin(h, 3)]
    block = produce_block(MinerContext(state, rr), h, [], election=ElectionMode.ROUND_ROBIN)
    assert accept_block(state, block) is Verdict.ACCEPTED


def _ordered_tpms_for(fix, state):
    by_label = {m.label: m.boot() for m in fix.keys.miners}
    return [by_label[label] for label in state.miner_list.labels()]


def test_vrf_block_from_ineligible_miner_rejected():
    fix = build_fixtures(SEED, 3, election_mode=ElectionMode.VRF)
    state = fix.genesis.initial_state()
    tpms = _ordered_tpms_for(fix, state)
    winners = {i for i, _ in vrf_round(tpms, state.tip_hash)}
    loser = next(i for i in range(3) if i not in winners)
    out = tpms[loser].vrf_prove(state.tip_hash)
    block = produce_block(MinerContext(state, tpms[1 % 3]), 1, [], election=ElectionMode.ROUND_ROBIN)
    header = replace(block.header, miner_label=tpms[loser].label, election_mode=ElectionMode.VRF,
                     vrf_output=out)
    header = replace(header, quote=tpms[loser].quote((0, 1, 2), header.binding_hash))
    assert validate_block(state, Block(header, (), (), ())) is Verdict.NOT_ELECTED


# -- cold start --------------------------------------------------------------

def test_rebuild_from_genesis_without_execution():
    state = _grow(FIX.genesis.initial_state(), 12, tx_every=2)
    c = ExecutionCounter()
    rebuilt = rebuild_from_genesis([decode_block(b.encode()) for b in state.blocks], FIX.genesis, c)
    assert rebuilt.tip_hash == state.tip_hash
    assert rebuilt.world_state.root == state.world_state.root
    assert c.count == 0


def test_rebuild_reports_first_bad_height():
    state = _grow(FIX.genesis.initial_state(), 55, tx_every=5)
    blocks = list(state.blocks)
    q = blocks[50].header.quote
    corrupt = replace(q, signature=bytes([q.signature[0] ^ 1]) + q.signature[1:])
    blocks[50] = blocks[50].with_quote(corrupt)
    c = ExecutionCounter()
    with pytest.raises(ChainVerificationError) as err:
        rebuild_from_genesis(blocks, FIX.genesis, c)
    assert err.value.height == 50
    assert err.value.verdict == "bad_quote"
    assert c.count == 0


def test_rebuild_rejects_foreign_genesis():
    other = build_fixtures(b"\x01" * 32, 3)
    state = _grow(FIX.genesis.initial_state(), 1)
    with pytest.raises(ChainVerificationError) as err:
        rebuild_from_genesis(state.blocks, other.genesis)
    assert err.value.height == 0
    with pytest.raises(ChainVerificationError):
        rebuild_from_genesis([], FIX.genesis)


@settings(max_examples=25, deadline=None)
@given(st.data())
def test_any_bit_flip_in_a_block_is_caught(data):
    state = FIX.genesis.initial_state()
    block = _next_block(state, [_transfer(0)])
    raw = bytearray(block.encode())
    pos = data.draw(st.integers(0, len(raw) - 1))
    raw[pos] ^= 1 << data.draw(st.integers(0, 7))
    try:
        mutated = decode_block(bytes(raw))
    except Exception:
        return
    assert validate_block(state, mutated) is not Verdict.ACCEPTED
