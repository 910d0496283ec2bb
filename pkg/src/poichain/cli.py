"""Command-line entry point.

    poi gen-fixtures --seed 7 --miners 4 --out fixtures/
    poi run fixtures/scenario.yaml --metrics out.csv --dump-chain out.chain
    poi verify-chain out.chain fixtures/genesis.json

Exit codes: 0 success, 1 assertion failure or invalid chain, 2 usage or
configuration error.  Log verbosity comes from ``POI_LOG_LEVEL``
(error, warn, info, debug).

Scenario files (schema ``poi-scenario/1``) are YAML mappings::

    schema: poi-scenario/1
    seed: 7                      # 64-bit; drives latency, loss and workload
    genesis: genesis.json        # optional, relative to the scenario file;
    keys: keys.json              #   both or neither
    miners: 4                    # genesis miners (required without genesis)
    relays: 2
    election_mode: round_robin   # or vrf
    target_height: 20
    latency_min_ms: 10
    latency_max_ms: 50
    drop_rate: 0.0
    block_interval_ms: 1000
    election_timeout_ms: 2000
    candidate_window_ms: 1000
    paranoid_validation: false
    join_times_ms: [5000]        # one join candidate per entry
    workload:
      txs_per_block: 1
      wallets: 16
      mix: {transfer: 1.0}       # transfer, counter, random_draw, oracle_fetch
      max_amount: 100
      draw_bytes: 16
      max_txs_per_block: 1000
      oracle_fixtures: {"price:XYZ": "42"}
      oracle_faults: ["price:DOWN"]
    adversaries:
      - {kind: tampered_pcr_miner, slot: 1}
    expect:
      converged: true            # every honest node at target_height, same tip
      max_forks: 0
      adversaries_rejected: true # every malicious item rejected with its verdict by every honest node
      single_execution: true     # executions across nodes == transactions in the chain
      oracle_single_request: true
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Optional

import yaml

from . import codec
from .blocks import ElectionMode, decode_block
from .consensus import ChainVerificationError, rebuild_from_genesis
from .crypto import derive_seed
from .execution import ExecutionCounter
from .genesis import Fixtures, GenesisConfig, GenesisError, KeyBundle, build_fixtures
from .sim import AdversaryKind, AdversarySpec, ConfigError, SimParams, WorkloadSpec, run_scenario

SCENARIO_SCHEMA = "poi-scenario/1"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("poichain")


class ScenarioError(ValueError):
    def __init__(self, field: str, line: Optional[int], msg: str):
        where = f" (line {line})" if line else ""
        super().__init__(f"{field}{where}: {msg}")
        self.field = field
        self.line = line


# -- scenario parsing -------------------------------------------------------

def _to_python(node, path: str, lines: dict[str, int]) -> Any:
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            if not isinstance(k, yaml.ScalarNode):
                raise ScenarioError(path or "<root>", k.start_mark.line + 1, "mapping keys must be scalars")
            key = k.value
            if key in out:
                raise ScenarioError(f"{path}.{key}".lstrip("."), k.start_mark.line + 1, "duplicate key")
            out[key] = _to_python(v, f"{path}.{key}".lstrip("."), lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_to_python(v, f"{path}[{i}]", lines) for i, v in enumerate(node.value)]
    return yaml.SafeLoader("").construct_object(node)


class _Fields:
    """Typed accessors over one mapping that report the offending field and line."""

    def __init__(self, data: dict, prefix: str, lines: dict[str, int]):
        if not isinstance(data, dict):
            raise ScenarioError(prefix or "<root>", lines.get(prefix), "expected a mapping")
        self.data, self.prefix, self.lines = data, prefix, lines
        self.used: set[str] = set()

    def path(self, key: str) -> str:
        return f"{self.prefix}.{key}" if self.prefix else key

    def fail(self, key: str, msg: str):
        p = self.path(key)
        raise ScenarioError(p, self.lines.get(p, self.lines.get(self.prefix)), msg)

    def get(self, key: str, kind, default=None, required: bool = False):
        self.used.add(key)
        if key not in self.data:
            if required:
                self.fail(key, "required field is missing")
            return default
        v = self.data[key]
        if kind is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        ok = isinstance(v, kind) and not (kind is int and isinstance(v, bool))
        if not ok:
            self.fail(key, f"expected {getattr(kind, '__name__', kind)}, got {type(v).__name__}")
        return v

    def check_unknown(self) -> None:
        for key in self.data:
            if key not in self.used:
                self.fail(key, "unknown field")


def _parse_workload(data: dict, lines) -> WorkloadSpec:
    f = _Fields(data, "workload", lines)
    d = WorkloadSpec()
    mix_raw = f.get("mix", dict, None)
    mix = d.mix
    if mix_raw is not None:
        mix = []
        for k, w in mix_raw.items():
            if k not in WorkloadSpec.KINDS:
                f.fail(f"mix.{k}", f"unknown transaction kind; expected one of {WorkloadSpec.KINDS}")
            if isinstance(w, bool) or not isinstance(w, (int, float)) or w < 0:
                f.fail(f"mix.{k}", "weight must be a non-negative number")
            mix.append((k, float(w)))
        mix = tuple(mix)
    fixtures = f.get("oracle_fixtures", dict, {})
    for k, v in fixtures.items():
        if not isinstance(v, str):
            f.fail(f"oracle_fixtures.{k}", "responses must be strings")
    faults = f.get("oracle_faults", list, [])
    for i, v in enumerate(faults):
        if not isinstance(v, str):
            f.fail(f"oracle_faults[{i}]", "requests must be strings")
    spec = WorkloadSpec(
        txs_per_block=f.get("txs_per_block", int, d.txs_per_block),
        wallets=f.get("wallets", int, d.wallets),
        mix=mix,
        max_amount=f.get("max_amount", int, d.max_amount),
        draw_bytes=f.get("draw_bytes", int, d.draw_bytes),
        oracle_fixtures=tuple((str(k).encode(), v.encode()) for k, v in fixtures.items()),
        oracle_faults=tuple(v.encode() for v in faults),
        max_txs_per_block=f.get("max_txs_per_block", int, d.max_txs_per_block),
    )
    f.check_unknown()
    try:
        spec.validate()
    except ConfigError as exc:
        raise ScenarioError("workload", lines.get("workload"), str(exc)) from None
    return spec


def load_scenario(path, seed_override: Optional[int] = None) -> tuple[SimParams, dict]:
    """Parse a scenario file into :class:`SimParams` plus its ``expect`` block."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(str(path), None, f"cannot read: {exc.strerror}") from None
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioError(str(path), mark.line + 1 if mark else None, f"invalid YAML: {exc}") from None
    if node is None:
        raise ScenarioError(str(path), None, "scenario file is empty")
    lines: dict[str, int] = {}
    data = _to_python(node, "", lines)
    f = _Fields(data, "", lines)
    schema = f.get("schema", str, required=True)
    if schema != SCENARIO_SCHEMA:
        f.fail("schema", f"expected {SCENARIO_SCHEMA!r}")
    seed = f.get("seed", int, required=True)
    if seed_override is not None:
        seed = seed_override
    if not 0 <= seed < 2 ** 64:
        f.fail("seed", "must be a 64-bit unsigned integer")

    fixtures = None
    g, k = f.get("genesis", str), f.get("keys", str)
    if (g is None) != (k is None):
        f.fail("genesis" if g is None else "keys", "genesis and keys must be given together")
    if g is not None:
        try:
            fixtures = Fixtures(GenesisConfig.load(path.parent / g), KeyBundle.load(path.parent / k))
        except (OSError, GenesisError) as exc:
            f.fail("genesis", str(exc))

    mode_raw = f.get("election_mode", str)
    try:
        mode = ElectionMode(mode_raw) if mode_raw is not None else (
            ElectionMode(fixtures.genesis.election_mode) if fixtures else ElectionMode.ROUND_ROBIN)
    except ValueError:
        f.fail("election_mode", "expected 'round_robin' or 'vrf'")
    miners = f.get("miners", int, len(fixtures.genesis.miners) if fixtures else None, required=fixtures is None)

    joins = f.get("join_times_ms", list, [])
    for i, t in enumerate(joins):
        if isinstance(t, bool) or not isinstance(t, (int, float)) or t < 0:
            f.fail(f"join_times_ms[{i}]", "must be a non-negative number")

    adversaries = []
    for i, a in enumerate(f.get("adversaries", list, [])):
        af = _Fields(a, f"adversaries[{i}]", lines)
        kind = af.get("kind", str, required=True)
        try:
            kind = AdversaryKind(kind)
        except ValueError:
            af.fail("kind", f"unknown adversary; expected one of {[x.value for x in AdversaryKind]}")
        adversaries.append(AdversarySpec(kind, af.get("slot", int, 0)))
        af.check_unknown()

    workload = _parse_workload(f.get("workload", dict, {}), lines)
    expect = f.get("expect", dict, {})
    ef = _Fields(expect, "expect", lines)
    for key, kind in (("converged", bool), ("max_forks", int), ("adversaries_rejected", bool),
                      ("single_execution", bool), ("oracle_single_request", bool)):
        ef.get(key, kind)
    ef.check_unknown()

    d = SimParams(seed=0)
    params = SimParams(
        seed=seed,
        n_miners=miners,
        n_relays=f.get("relays", int, 0),
        join_times_ms=tuple(float(t) for t in joins),
        election_mode=mode,
        latency_min_ms=f.get("latency_min_ms", float, d.latency_min_ms),
        latency_max_ms=f.get("latency_max_ms", float, d.latency_max_ms),
        drop_rate=f.get("drop_rate", float, d.drop_rate),
        block_interval_ms=f.get("block_interval_ms", float, d.block_interval_ms),
        election_timeout_ms=f.get("election_timeout_ms", float, d.election_timeout_ms),
        candidate_window_ms=f.get("candidate_window_ms", float, d.candidate_window_ms),
        target_height=f.get("target_height", int, d.target_height),
        paranoid_validation=f.get("paranoid_validation", bool, False),
        workload=workload,
        adversaries=tuple(adversaries),
        fixtures=fixtures,
    )
    f.check_unknown()
    try:
        params.validate()
    except ConfigError as exc:
        raise ScenarioError(str(path), None, str(exc)) from None
    return params, expect


def evaluate_expectations(result, expect: dict) -> list[tuple[str, bool, str]]:
    net = result.metrics.network
    checks = []
    if "converged" in expect:
        checks.append(("converged", net["converged"] == expect["converged"],
                       f"converged={net['converged']}"))
    if "max_forks" in expect:
        checks.append(("max_forks", net["fork_count"] <= expect["max_forks"], f"fork_count={net['fork_count']}"))
    if expect.get("adversaries_rejected"):
        report = result.adversary_report()
        ok = bool(report) and all(r["all_rejected"] for r in report)
        detail = "; ".join(f"{r['kind']}: {r['emitted']} emitted, expected {r['expected_verdict']}"
                           for r in report) or "no adversaries in scenario"
        checks.append(("adversaries_rejected", ok, detail))
    if expect.get("single_execution"):
        ok = net["executions_total"] == net["transactions"] and not result.params.paranoid_validation
        checks.append(("single_execution", ok,
                       f"executions={net['executions_total']} transactions={net['transactions']}"))
    if expect.get("oracle_single_request"):
        checks.append(("oracle_single_request", net["offchain_requests"] == net["oracle_transactions"],
                       f"requests={net['offchain_requests']} oracle_txs={net['oracle_transactions']}"))
    return checks


# -- commands ---------------------------------------------------------------

def fixture_seed(seed: int) -> bytes:
    return derive_seed("cli/fixtures", seed)


def default_scenario(seed: int, n_miners: int, n_candidates: int) -> dict:
    return {
        "schema": SCENARIO_SCHEMA,
        "seed": seed,
        "genesis": "genesis.json",
        "keys": "keys.json",
        "miners": n_miners,
        "relays": 2,
        "target_height": 20,
        "join_times_ms": [5000.0 * (i + 1) for i in range(n_candidates)],
        "workload": {"txs_per_block": 2, "wallets": 16, "mix": {"transfer": 1.0}},
        "expect": {"converged": True, "max_forks": 0, "single_execution": True},
    }


def cmd_gen_fixtures(args) -> int:
    if args.miners < 1:
        print("error: --miners must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create {out}: {exc.strerror}", file=sys.stderr)
        return EXIT_USAGE
    fx = build_fixtures(fixture_seed(args.seed), args.miners, n_candidates=args.candidates,
                        n_wallets=args.wallets, election_mode=ElectionMode(args.election_mode))
    try:
        fx.genesis.save(out / "genesis.json")
        fx.keys.save(out / "keys.json")
        scenario = default_scenario(args.seed, args.miners, args.candidates)
        scenario["election_mode"] = args.election_mode
        (out / "scenario.yaml").write_text(yaml.safe_dump(scenario, sort_keys=False))
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"wrote {out / 'genesis.json'}, {out / 'keys.json'}, {out / 'scenario.yaml'}")
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        params, expect = load_scenario(args.scenario, args.seed)
    except ScenarioError as exc:
        print(f"error: scenario {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        result = run_scenario(params)
    except ConfigError as exc:
        print(f"error: scenario: {exc}", file=sys.stderr)
        return EXIT_USAGE
    net = result.metrics.network
    print(f"height {net['final_height']}/{params.target_height}  converged={net['converged']}  "
          f"forks={net['fork_count']}  tip={net['final_chain_hash']}")
    try:
        if args.metrics:
            result.metrics.write(args.metrics)
        if args.dump_chain:
            Path(args.dump_chain).write_bytes(
                codec.write_frames([b.encode() for b in result.reference().chain.blocks]))
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    failed = False
    for name, ok, detail in evaluate_expectations(result, expect):
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed |= not ok
    return EXIT_FAIL if failed else EXIT_OK


def cmd_verify_chain(args) -> int:
    try:
        genesis = GenesisConfig.load(args.genesis)
        data = Path(args.chain).read_bytes()
    except (OSError, GenesisError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        frames = codec.read_frames(data)
        if not frames:
            raise codec.CodecError("empty chain file: no frame at byte offset 0")
    except codec.CodecError as exc:
        print(f"framing error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    blocks = []
    for height, frame in enumerate(frames):
        try:
            blocks.append(decode_block(frame))
        except (codec.CodecError, ValueError) as exc:
            print(f"invalid block at height {height}: malformed ({exc})", file=sys.stderr)
            return EXIT_FAIL
    counter = ExecutionCounter()
    try:
        state = rebuild_from_genesis(blocks, genesis, counter)
    except ChainVerificationError as exc:
        print(f"invalid block at height {exc.height}: {exc.verdict}", file=sys.stderr)
        return EXIT_FAIL
    except GenesisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"height: {state.height}")
    print(f"tip: {state.tip_hash.hex()}")
    print(f"state_root: {state.world_state.root.hex()}")
    print(f"executions: {counter.count}")
    print(f"miners: {len(state.miner_list)}")
    for i, rec in enumerate(state.miner_list):
        print(f"  [{i}] {rec.label.hex()} joined at {rec.join_height}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="poi", description="Proof-of-Integrity chain simulator")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-fixtures", help="write genesis.json, keys.json and scenario.yaml")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--miners", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--candidates", type=int, default=0, help="extra certified identities for mid-run joins")
    g.add_argument("--wallets", type=int, default=16)
    g.add_argument("--election-mode", choices=[m.value for m in ElectionMode], default="round_robin")
    g.set_defaults(func=cmd_gen_fixtures)

    r = sub.add_parser("run", help="run a scenario file")
    r.add_argument("scenario")
    r.add_argument("--metrics", help="metrics CSV path; a JSON summary is written next to it")
    r.add_argument("--dump-chain", help="write the final chain as length-prefixed blocks")
    r.add_argument("--seed", type=int, help="override the scenario seed")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify-chain", help="rebuild state from a chain dump without executing")
    v.add_argument("chain")
    v.add_argument("genesis")
    v.set_defaults(func=cmd_verify_chain)
    return p


def configure_logging() -> None:
    level = os.environ.get("POI_LOG_LEVEL", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "candidates", 0) < 0 or getattr(args, "wallets", 1) < 1:
        print("error: --candidates must be >= 0 and --wallets >= 1", file=sys.stderr)
        return EXIT_USAGE
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
