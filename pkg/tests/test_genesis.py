import json

import pytest

from poichain.blocks import ElectionMode
from poichain.genesis import (
    GenesisConfig,
    GenesisError,
    KeyBundle,
    booted_tpm,
    build_fixtures,
    make_join_request,
    manifest_from_json,
    manifest_to_json,
    tampered_manifest,
)


def test_fixtures_are_a_pure_function_of_the_seed():
    a = build_fixtures(bytes(32), 3)
    b = build_fixtures(bytes(32), 3)
    assert a.genesis.to_json() == b.genesis.to_json()
    assert a.keys.to_json() == b.keys.to_json()
    assert a.genesis.genesis_block().hash.hex() == \
        "fcbcb526b112cb36944559fcd330a6880120e5eef639a03677629f2bb2a7cc06"
    assert build_fixtures(b"\x01" * 32, 3).genesis.to_json() != a.genesis.to_json()


def test_genesis_state():
    fx = build_fixtures(bytes(32), 3, n_wallets=5, balance=77)
    state = fx.genesis.initial_state()
    assert state.height == 0
    assert len(state.miner_list) == 3
    assert set(state.miner_list.labels()) == {m.label for m in fx.keys.miners}
    assert state.world_state.total_balance() == 5 * 77
    assert state.tip.header.state_root == state.world_state.root


def test_json_roundtrip(tmp_path):
    fx = build_fixtures(bytes(32), 2, n_candidates=1, n_wallets=3, election_mode=ElectionMode.VRF)
    fx.genesis.save(tmp_path / "genesis.json")
    fx.keys.save(tmp_path / "keys.json")
    g = GenesisConfig.load(tmp_path / "genesis.json")
    k = KeyBundle.load(tmp_path / "keys.json")
    assert g.genesis_block().encode() == fx.genesis.genesis_block().encode()
    assert g.election_mode == ElectionMode.VRF
    assert k.to_json() == fx.keys.to_json()
    assert k.miners[0].boot().label == fx.keys.miners[0].label
    assert manifest_from_json(manifest_to_json(tampered_manifest())) == tampered_manifest()


def test_with_mode_changes_only_the_mode():
    fx = build_fixtures(bytes(32), 2)
    vrf = fx.genesis.with_mode(ElectionMode.VRF)
    assert vrf.election_mode == ElectionMode.VRF
    assert vrf.miners == fx.genesis.miners
    assert vrf.genesis_block().hash != fx.genesis.genesis_block().hash


def test_malformed_inputs():
    with pytest.raises(GenesisError):
        build_fixtures(bytes(32), 0)
    good = build_fixtures(bytes(32), 1).genesis.to_json()
    with pytest.raises(GenesisError, match="schema"):
        GenesisConfig.from_json({**good, "schema": "other/1"})
    with pytest.raises(GenesisError):
        GenesisConfig.from_json({**good, "miners": ["zz"]})
    with pytest.raises(GenesisError):
        KeyBundle.from_json({"schema": "poi-keys/1"})


def test_genesis_rejects_unattested_miner():
    fx = build_fixtures(bytes(32), 2)
    m = fx.keys.miners[0]
    bad = make_join_request(booted_tpm(m.tpm_seed, tampered_manifest()), m.certificate, 0)
    cfg = GenesisConfig(fx.genesis.trusted_roots, (bad,) + fx.genesis.miners[1:],
                        fx.genesis.integrity_list, fx.genesis.balances)
    with pytest.raises(GenesisError, match="integrity_not_listed"):
        cfg.initial_state()


def test_key_file_holds_no_extra_secrets():
    fx = build_fixtures(bytes(32), 1)
    text = json.dumps(fx.genesis.to_json())
    assert fx.keys.miners[0].tpm_seed.hex() not in text
    assert fx.keys.wallets[0].secret.hex() not in text
