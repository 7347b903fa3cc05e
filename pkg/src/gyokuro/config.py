"""Declarative JSON configuration and on-disk key material.

A config file names the service addresses, the key directory, batch and
history sizes, the database adversary mode and benchmark parameters::

    {
      "addresses": {"tee": "127.0.0.1:7401", "db": "127.0.0.1:7402",
                    "monitor": "127.0.0.1:7403"},
      "keys": "keys",
      "batch_size": 32,
      "history_capacity": 1024,
      "adversary": {"mode": "honest"},
      "bench": {"levels": [16, 32, 64], "iterations": 50}
    }

``history_capacity`` may instead be derived from reception frequencies
with ``"frequencies": {"tee": 10, "monitor": 2}``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .bench import BenchConfig
from .core import AttestationAuthority, KeyRegistry, PrivateKey, generate_key, load_private_pem, load_public, private_pem, public_bytes
from .database import AdversaryMode
from .deploy import Identities, tee_measurement
from .tee import DEFAULT_BATCH_SIZE, DEFAULT_HISTORY, TeeConfig, compute_history_capacity
from .wire import parse_address

TRUST_FILE = "trust.json"
APK_FILE = "apk.bin"
AUTHORITY_FILE = "authority.pem"


@dataclass
class GyokuroConfig:
    tee: str = "127.0.0.1:7401"
    db: str = "127.0.0.1:7402"
    monitor: str = "127.0.0.1:7403"
    keys: str = "keys"
    batch_size: int = DEFAULT_BATCH_SIZE
    history_capacity: int = DEFAULT_HISTORY
    flush_timeout: float | None = 1.0
    blocking: bool = False
    ack_timeout: float = 2.0
    monitor_id: str = "monitor-1"
    source_id: str = "source-1"
    pull_period: float = 1.0
    db_log: str | None = None
    adversary: AdversaryMode = field(default_factory=AdversaryMode.honest)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @classmethod
    def from_dict(cls, d: dict[str, Any], base: Path | None = None) -> "GyokuroConfig":
        d = dict(d)
        known = {
            "addresses", "keys", "batch_size", "history_capacity", "frequencies", "flush_timeout",
            "blocking", "ack_timeout", "monitor_id", "source_id", "pull_period", "db_log", "adversary", "bench",
        }
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw: dict[str, Any] = {k: d[k] for k in known - {"addresses", "frequencies", "adversary", "bench"} if k in d}
        for role, addr in d.get("addresses", {}).items():
            if role not in ("tee", "db", "monitor"):
                raise ValueError(f"unknown address role {role!r}")
            parse_address(addr)
            kw[role] = addr
        if "frequencies" in d:
            if "history_capacity" in d:
                raise ValueError("give either history_capacity or frequencies, not both")
            f = d["frequencies"]
            kw["history_capacity"] = compute_history_capacity(f["tee"], f["monitor"])
        if "adversary" in d:
            kw["adversary"] = AdversaryMode.from_config(d["adversary"])
        if "bench" in d:
            kw["bench"] = BenchConfig.from_dict(d["bench"])
        cfg = cls(**kw)
        if base is not None and not os.path.isabs(cfg.keys):
            cfg.keys = str(base / cfg.keys)
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike[str] | None) -> "GyokuroConfig":
        if path is None:
            return cls()
        p = Path(path)
        return cls.from_dict(json.loads(p.read_text()), base=p.parent)

    def tee_config(self) -> TeeConfig:
        return TeeConfig(
            batch_size=self.batch_size,
            history_capacity=self.history_capacity,
            flush_timeout=self.flush_timeout,
            blocking=self.blocking,
            ack_timeout=self.ack_timeout,
        )

    def address(self, role: str) -> tuple[str, int]:
        return parse_address(getattr(self, role))

    def to_dict(self) -> dict[str, Any]:
        return {
            "addresses": {"tee": self.tee, "db": self.db, "monitor": self.monitor},
            "keys": self.keys,
            "batch_size": self.batch_size,
            "history_capacity": self.history_capacity,
            "flush_timeout": self.flush_timeout,
            "blocking": self.blocking,
            "ack_timeout": self.ack_timeout,
            "monitor_id": self.monitor_id,
            "source_id": self.source_id,
            "pull_period": self.pull_period,
            "db_log": self.db_log,
            "adversary": {**asdict(self.adversary), "omit_batches": sorted(self.adversary.omit_batches)},
            "bench": asdict(self.bench),
        }


# ---------------------------------------------------------------------------
# Key directory
# ---------------------------------------------------------------------------


def _write_key(path: Path, key: PrivateKey) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(private_pem(key))
    path.chmod(0o600)


def generate_keys(key_dir: str | os.PathLike[str], source_ids: list[str], monitor_ids: list[str]) -> dict[str, Any]:
    """Trusted setup: authority, source and monitor keys plus a public trust file."""
    root = Path(key_dir)
    authority = generate_key()
    _write_key(root / AUTHORITY_FILE, authority)
    trust: dict[str, Any] = {
        "apk": public_bytes(authority).hex(),
        "em": tee_measurement().hex(),
        "sources": {},
        "monitors": {},
    }
    for role, ids in (("sources", source_ids), ("monitors", monitor_ids)):
        for key_id in ids:
            key = generate_key()
            _write_key(root / role / f"{key_id}.pem", key)
            trust[role][key_id] = public_bytes(key).hex()
    (root / APK_FILE).write_bytes(public_bytes(authority))
    (root / TRUST_FILE).write_text(json.dumps(trust, indent=2) + "\n")
    return trust


def load_trust(key_dir: str | os.PathLike[str]) -> KeyRegistry:
    trust = json.loads((Path(key_dir) / TRUST_FILE).read_text())
    return KeyRegistry(
        apk=load_public(bytes.fromhex(trust["apk"])),
        expected_measurement=bytes.fromhex(trust["em"]),
        data_source_keys={k: load_public(bytes.fromhex(v)) for k, v in trust["sources"].items()},
        monitor_keys={k: load_public(bytes.fromhex(v)) for k, v in trust["monitors"].items()},
    )


def load_private(key_dir: str | os.PathLike[str], role: str, key_id: str) -> PrivateKey:
    return load_private_pem((Path(key_dir) / role / f"{key_id}.pem").read_bytes())


def load_authority(key_dir: str | os.PathLike[str]) -> AttestationAuthority:
    return AttestationAuthority(load_private_pem((Path(key_dir) / AUTHORITY_FILE).read_bytes()))


def load_identities(key_dir: str | os.PathLike[str]) -> Identities:
    """Every private key in the directory, for single-host runs."""
    root = Path(key_dir)
    trust = json.loads((root / TRUST_FILE).read_text())
    return Identities(
        authority=load_authority(root),
        measurement=bytes.fromhex(trust["em"]),
        sources={k: load_private(root, "sources", k) for k in trust["sources"]},
        monitors={k: load_private(root, "monitors", k) for k in trust["monitors"]},
    )


def read_apk(path: str | os.PathLike[str]):
    """APK from a raw 65-byte point, its hex form, or a trust file."""
    data = Path(path).read_bytes()
    if len(data) == 65:
        return load_public(data)
    text = data.decode().strip()
    if text.startswith("{"):
        return load_public(bytes.fromhex(json.loads(text)["apk"]))
    return load_public(bytes.fromhex(text))
