"""Genesis configuration and seed-derived fixtures.

``genesis.json`` (schema ``poi-genesis/1``)::

    {
      "schema": "poi-genesis/1",
      "election_mode": "round_robin" | "vrf",
      "trusted_roots": [{"issuer_id": hex, "public_key": hex}, ...],
      "integrity_list": [hex composite, ...],
      "miners": [hex JoinRequest encoding, ...],
      "balances": [{"address": hex, "balance": int}, ...]
    }

``keys.json`` (schema ``poi-keys/1``) holds what only the operator may see:
per-miner TPM seeds and boot manifests, pre-certified join candidates, and
wallet secrets.  Every byte of both files is a pure function of the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .attestation import (
    Component,
    IntegrityList,
    MeasurementManifest,
    Stage,
    build_report,
    replay_event_log,
    simulate_measured_boot,
    verify_report,
)
from .blocks import Block, BlockHeader, ElectionMode, JoinRequest, body_roots
from .consensus import ChainState, MinerList, MinerRecord
from .crypto import ZERO_DIGEST, Certificate, KeyPair, derive_seed, issue_certificate, sha256
from .execution import WorldState
from .tpm import Tpm

GENESIS_SCHEMA = "poi-genesis/1"
KEYS_SCHEMA = "poi-keys/1"
DEFAULT_BALANCE = 1_000_000_000


class GenesisError(Exception):
    pass


def honest_manifest() -> MeasurementManifest:
    """The reference platform every honest miner boots."""
    parts = [
        (Stage.STATIC, "firmware", "fw-2.4.1"),
        (Stage.STATIC, "bootloader", "grub-2.06"),
        (Stage.DYNAMIC, "kernel", "linux-6.1.0"),
        (Stage.DYNAMIC, "initrd", "initrd-6.1.0"),
        (Stage.IMA, "node-binary", "poi-node-1.0"),
        (Stage.IMA, "node-config", "poi-config-1.0"),
    ]
    return MeasurementManifest(tuple(Component(st, name, sha256(ver.encode())) for st, name, ver in parts))


def tampered_manifest() -> MeasurementManifest:
    """Reference platform with a patched node binary."""
    return honest_manifest().replace_digest("node-binary", sha256(b"poi-node-1.0+backdoor"))


def manifest_to_json(m: MeasurementManifest) -> list[dict]:
    return [{"stage": Stage(c.stage).value, "name": c.name, "digest": c.digest.hex()} for c in m.components]


def manifest_from_json(items: Sequence[Mapping]) -> MeasurementManifest:
    return MeasurementManifest(tuple(Component(Stage(i["stage"]), i["name"], bytes.fromhex(i["digest"]))
                                     for i in items))


def manifest_composite(m: MeasurementManifest) -> bytes:
    tpm = Tpm(bytes(32))
    simulate_measured_boot(tpm, m)
    return replay_event_log(tpm.event_log)


def booted_tpm(seed: bytes, manifest: MeasurementManifest) -> Tpm:
    tpm = Tpm(seed)
    simulate_measured_boot(tpm, manifest)
    return tpm


def make_join_request(tpm: Tpm, cert: Certificate, requested_at: int) -> JoinRequest:
    """Quote the booted TPM over the join payload and attach the event log."""
    unsigned = JoinRequest(build_report(tpm, bytes(32), cert, include_log=True), requested_at)
    return JoinRequest(build_report(tpm, unsigned.binding(), cert, include_log=True), requested_at)


@dataclass
class GenesisConfig:
    trusted_roots: dict[bytes, bytes]
    miners: tuple[JoinRequest, ...]
    integrity_list: IntegrityList
    balances: dict[bytes, int]
    election_mode: ElectionMode = ElectionMode.ROUND_ROBIN

    def world_state(self) -> WorldState:
        return WorldState.from_balances(self.balances)

    def genesis_block(self) -> Block:
        tx_root, results_root, joins_root = body_roots((), (), self.miners)
        header = BlockHeader(0, ZERO_DIGEST, tx_root, results_root, joins_root,
                             self.world_state().root, ZERO_DIGEST, self.election_mode)
        return Block(header, (), (), tuple(self.miners))

    def initial_state(self) -> ChainState:
        """Height-0 chain.  Every genesis miner must pass remote attestation."""
        records = []
        for req in self.miners:
            verdict = verify_report(req.report, self.trusted_roots, self.integrity_list, req.binding())
            if not verdict.accepted or req.report.event_log is None:
                raise GenesisError(f"genesis miner {req.label.hex()[:16]} fails attestation: "
                                   f"{verdict.failure.value}")
            records.append(MinerRecord(req.label, req.report.identity_certificate, 0))
        return ChainState(blocks=[self.genesis_block()], miner_list=MinerList(records),
                          integrity_list=self.integrity_list, trusted_roots=dict(self.trusted_roots),
                          world_state=self.world_state(), election_mode=ElectionMode(self.election_mode))

    def with_mode(self, mode: ElectionMode) -> "GenesisConfig":
        return GenesisConfig(self.trusted_roots, self.miners, self.integrity_list, self.balances,
                             ElectionMode(mode))

    def to_json(self) -> dict:
        return {
            "schema": GENESIS_SCHEMA,
            "election_mode": ElectionMode(self.election_mode).value,
            "trusted_roots": [{"issuer_id": k.hex(), "public_key": v.hex()}
                              for k, v in sorted(self.trusted_roots.items())],
            "integrity_list": [c.hex() for c in self.integrity_list],
            "miners": [m.encode().hex() for m in self.miners],
            "balances": [{"address": a.hex(), "balance": b} for a, b in sorted(self.balances.items())],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "GenesisConfig":
        try:
            if obj.get("schema") != GENESIS_SCHEMA:
                raise GenesisError(f"schema: expected {GENESIS_SCHEMA!r}, got {obj.get('schema')!r}")
            return cls(
                trusted_roots={bytes.fromhex(r["issuer_id"]): bytes.fromhex(r["public_key"])
                               for r in obj["trusted_roots"]},
                miners=tuple(JoinRequest.decode(bytes.fromhex(m)) for m in obj["miners"]),
                integrity_list=IntegrityList(bytes.fromhex(c) for c in obj["integrity_list"]),
                balances={bytes.fromhex(b["address"]): int(b["balance"]) for b in obj["balances"]},
                election_mode=ElectionMode(obj["election_mode"]),
            )
        except GenesisError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise GenesisError(f"malformed genesis config: {exc!r}") from None

    def save(self, path) -> None:
        _write_json(path, self.to_json())

    @classmethod
    def load(cls, path) -> "GenesisConfig":
        return cls.from_json(_read_json(path))


@dataclass
class MinerKeys:
    tpm_seed: bytes
    manifest: MeasurementManifest
    certificate: Certificate

    @property
    def label(self) -> bytes:
        return self.certificate.subject_label

    def boot(self) -> Tpm:
        return booted_tpm(self.tpm_seed, self.manifest)

    def to_json(self) -> dict:
        return {"tpm_seed": self.tpm_seed.hex(), "label": self.label.hex(),
                "certificate": self.certificate.encode().hex(),
                "manifest": manifest_to_json(self.manifest)}

    @classmethod
    def from_json(cls, obj: Mapping) -> "MinerKeys":
        return cls(bytes.fromhex(obj["tpm_seed"]), manifest_from_json(obj["manifest"]),
                   Certificate.decode(bytes.fromhex(obj["certificate"])))


@dataclass
class KeyBundle:
    miners: list[MinerKeys]
    candidates: list[MinerKeys] = field(default_factory=list)
    wallets: list[KeyPair] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "schema": KEYS_SCHEMA,
            "miners": [m.to_json() for m in self.miners],
            "candidates": [m.to_json() for m in self.candidates],
            "wallets": [{"secret": w.secret.hex(), "address": w.label.hex()} for w in self.wallets],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "KeyBundle":
        try:
            if obj.get("schema") != KEYS_SCHEMA:
                raise GenesisError(f"schema: expected {KEYS_SCHEMA!r}, got {obj.get('schema')!r}")
            return cls([MinerKeys.from_json(m) for m in obj["miners"]],
                       [MinerKeys.from_json(m) for m in obj.get("candidates", [])],
                       [KeyPair.from_seed(bytes.fromhex(w["secret"])) for w in obj["wallets"]])
        except GenesisError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise GenesisError(f"malformed key file: {exc!r}") from None

    def save(self, path) -> None:
        _write_json(path, self.to_json())

    @classmethod
    def load(cls, path) -> "KeyBundle":
        return cls.from_json(_read_json(path))


@dataclass
class Fixtures:
    genesis: GenesisConfig
    keys: KeyBundle


def certificate_authority(seed: bytes) -> KeyPair:
    return KeyPair.from_seed(derive_seed("fixtures/ca", seed))


def build_fixtures(seed: bytes, n_miners: int, *, n_candidates: int = 0, n_wallets: int = 16,
                   balance: int = DEFAULT_BALANCE,
                   election_mode: ElectionMode = ElectionMode.ROUND_ROBIN) -> Fixtures:
    """Derive a complete network bootstrap from ``seed``.

    Miners and join candidates get TPMs booted with the honest manifest and
    certificates from one CA; the integrity list holds that manifest's
    composite.
    """
    if n_miners < 1:
        raise GenesisError("n_miners must be at least 1")
    ca = certificate_authority(seed)
    ca_id = ca.label
    manifest = honest_manifest()

    def keys_for(role: str, i: int) -> MinerKeys:
        tpm_seed = derive_seed("fixtures/tpm", role, seed, i)
        pk = Tpm(tpm_seed).attestation_public_key
        return MinerKeys(tpm_seed, manifest, issue_certificate(ca.secret, ca_id, pk))

    miners = [keys_for("miner", i) for i in range(n_miners)]
    candidates = [keys_for("candidate", i) for i in range(n_candidates)]
    wallets = [KeyPair.from_seed(derive_seed("fixtures/wallet", seed, i)) for i in range(n_wallets)]
    joins = tuple(make_join_request(m.boot(), m.certificate, 0) for m in miners)
    genesis = GenesisConfig(
        trusted_roots={ca_id: ca.public},
        miners=joins,
        integrity_list=IntegrityList([manifest_composite(manifest)]),
        balances={w.label: balance for w in wallets},
        election_mode=ElectionMode(election_mode),
    )
    return Fixtures(genesis, KeyBundle(miners, candidates, wallets))


def _write_json(path, obj) -> None:
    path = Path(path)
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from None


def _read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise GenesisError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
