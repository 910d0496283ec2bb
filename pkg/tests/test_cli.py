import json
import subprocess
import sys
from dataclasses import replace

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from poichain import codec
from poichain.blocks import decode_block
from poichain.cli import load_scenario, main


@pytest.fixture
def fixtures_dir(tmp_path):
    out = tmp_path / "fx"
    assert main(["gen-fixtures", "--seed", "7", "--miners", "3", "--out", str(out)]) == 0
    return out


@pytest.fixture
def chain_file(fixtures_dir, tmp_path):
    chain = tmp_path / "out.chain"
    assert main(["run", str(fixtures_dir / "scenario.yaml"), "--dump-chain", str(chain)]) == 0
    return chain


def test_gen_fixtures_is_deterministic(tmp_path, fixtures_dir):
    again = tmp_path / "again"
    assert main(["gen-fixtures", "--seed", "7", "--miners", "3", "--out", str(again)]) == 0
    for name in ("genesis.json", "keys.json", "scenario.yaml"):
        assert (again / name).read_bytes() == (fixtures_dir / name).read_bytes()
    assert json.loads((fixtures_dir / "genesis.json").read_text())["schema"] == "poi-genesis/1"


def test_run_and_verify_roundtrip(fixtures_dir, chain_file, tmp_path, capsys):
    metrics = tmp_path / "m.csv"
    assert main(["run", str(fixtures_dir / "scenario.yaml"), "--metrics", str(metrics)]) == 0
    assert metrics.read_text().startswith("schema,node,metric,value\n")
    assert (tmp_path / "m.json").exists()
    capsys.readouterr()
    assert main(["verify-chain", str(chain_file), str(fixtures_dir / "genesis.json")]) == 0
    out = capsys.readouterr().out
    assert "executions: 0" in out
    assert "miners: 3" in out


def test_console_script_entry_point(fixtures_dir, chain_file):
    proc = subprocess.run([sys.executable, "-m", "poichain.cli", "verify-chain", str(chain_file),
                           str(fixtures_dir / "genesis.json")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["gen-fixtures", "--seed", "1", "--miners", "0", "--out", str(tmp_path / "x")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["run"])
    assert exc.value.code == 2
    assert main(["run", str(tmp_path / "missing.yaml")]) == 2


@pytest.mark.parametrize("text, fragment", [
    ("schema: poi-scenario/1\nseed: 1\nminers: 2\nrelays: lots\n", "relays (line 4)"),
    ("schema: poi-scenario/1\nseed: 1\nminers: 2\nbogus: 3\n", "bogus"),
    ("schema: other/1\nseed: 1\nminers: 2\n", "schema"),
    ("schema: poi-scenario/1\nseed: 1\nminers: 2\ndrop_rate: 1.5\n", "drop_rate"),
    ("schema: poi-scenario/1\nseed: 1\nminers: 2\nadversaries:\n  - {kind: nope}\n", "kind"),
    ("schema: poi-scenario/1\nseed: 1\nminers: [\n", ""),
])
def test_bad_scenarios_report_field(tmp_path, capsys, text, fragment):
    path = tmp_path / "s.yaml"
    path.write_text(text)
    assert main(["run", str(path)]) == 2
    assert fragment in capsys.readouterr().err


def test_seed_override(tmp_path):
    path = tmp_path / "s.yaml"
    path.write_text("schema: poi-scenario/1\nseed: 1\nminers: 2\n")
    params, _ = load_scenario(path, seed_override=99)
    assert params.seed == 99


def test_failed_expectation_exits_1(tmp_path, capsys):
    path = tmp_path / "s.yaml"
    path.write_text("schema: poi-scenario/1\nseed: 1\nminers: 2\ntarget_height: 3\n"
                    "adversaries:\n  - {kind: equivocating_miner, slot: 0}\n"
                    "expect:\n  max_forks: -1\n")
    assert main(["run", str(path)]) == 1
    assert "FAIL max_forks" in capsys.readouterr().out


def test_verify_chain_errors(fixtures_dir, chain_file, tmp_path, capsys):
    genesis = str(fixtures_dir / "genesis.json")
    empty = tmp_path / "empty.chain"
    empty.write_bytes(b"")
    assert main(["verify-chain", str(empty), genesis]) == 1
    truncated = tmp_path / "trunc.chain"
    truncated.write_bytes(chain_file.read_bytes()[:-3])
    assert main(["verify-chain", str(truncated), genesis]) == 1
    assert "byte offset" in capsys.readouterr().err
    assert main(["verify-chain", str(chain_file), str(tmp_path / "nope.json")]) == 2


def test_verify_chain_names_height_of_corruption(fixtures_dir, chain_file, tmp_path, capsys):
    frames = codec.read_frames(chain_file.read_bytes())
    assert len(frames) > 3
    block = decode_block(frames[3])
    q = block.header.quote
    frames[3] = block.with_quote(replace(q, signature=bytes(64))).encode()
    bad = tmp_path / "bad.chain"
    bad.write_bytes(codec.write_frames(frames))
    assert main(["verify-chain", str(bad), str(fixtures_dir / "genesis.json")]) == 1
    assert "invalid block at height 3: bad_quote" in capsys.readouterr().err


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.data())
def test_bit_flips_in_saved_chain_never_verify(fixtures_dir, chain_file, tmp_path, data):
    raw = bytearray(chain_file.read_bytes())
    pos = data.draw(st.integers(0, len(raw) - 1))
    raw[pos] ^= 1 << data.draw(st.integers(0, 7))
    bad = tmp_path / "flip.chain"
    bad.write_bytes(bytes(raw))
    assert main(["verify-chain", str(bad), str(fixtures_dir / "genesis.json")]) == 1
