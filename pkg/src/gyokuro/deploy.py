"""Single-host deployment of every role on loopback TCP.

Used by the attack scenarios, the benchmarks, the acceptance suite and
the demos.  Any link can be routed through an :class:`Interposer`:

* ``source-tee``      data source  -> TEE
* ``client-tee``      client       -> TEE
* ``client-monitor``  client       -> monitor
* ``tee-db``          TEE          -> database host
* ``monitor-db``      monitor      -> database host
"""

from __future__ import annotations

import asyncio
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from . import tee as tee_module
from .clients import Client, DataSource, HandoverPackage
from .core import (
    AttestationAuthority,
    DataItem,
    KeyRegistry,
    PrivateKey,
    fold,
    generate_key,
    measurement_of,
    sign_item,
)
from .database import AdversaryMode, DatabaseHost, DatabaseServer
from .interposer import Interposer, Rule
from .monitor import Monitor, MonitorServer, TcpDatabaseReader
from .tee import Tee, TeeConfig, TeeServer

LINKS = ("source-tee", "client-tee", "client-monitor", "tee-db", "monitor-db")


def tee_measurement() -> bytes:
    """Measurement of the TEE code actually being served."""
    return measurement_of({"tee.py": Path(tee_module.__file__).read_bytes()})


@dataclass
class Identities:
    """Key material of one deployment (the trusted setup)."""

    authority: AttestationAuthority = field(default_factory=AttestationAuthority)
    measurement: bytes = field(default_factory=tee_measurement)
    sources: dict[str, PrivateKey] = field(default_factory=lambda: {"source-1": generate_key()})
    monitors: dict[str, PrivateKey] = field(default_factory=lambda: {"monitor-1": generate_key()})

    def tee_registry(self) -> KeyRegistry:
        return KeyRegistry(
            apk=self.authority.apk,
            expected_measurement=self.measurement,
            data_source_keys={k: v.public_key() for k, v in self.sources.items()},
            monitor_keys={k: v.public_key() for k, v in self.monitors.items()},
        )

    def client_registry(self) -> KeyRegistry:
        # Clients only need APK and EM; monitor keys let them check evidence.
        return KeyRegistry(
            apk=self.authority.apk,
            expected_measurement=self.measurement,
            monitor_keys={k: v.public_key() for k, v in self.monitors.items()},
        )


class Deployment:
    def __init__(
        self,
        batch_size: int = 32,
        history_capacity: int = tee_module.DEFAULT_HISTORY,
        flush_timeout: float | None = None,
        blocking: bool = False,
        adversary: AdversaryMode | None = None,
        links: dict[str, list[Rule]] | None = None,
        identities: Identities | None = None,
        monitor_sync: bool = False,
        pull_period: float = 1.0,
        client_timeout: float = 5.0,
        ack_timeout: float = 2.0,
        log_path: str | os.PathLike[str] | None = None,
        seed: int = 0,
    ) -> None:
        unknown = set(links or {}) - set(LINKS)
        if unknown:
            raise ValueError(f"unknown links: {sorted(unknown)}")
        self.ids = identities or Identities()
        self.config = TeeConfig(
            batch_size=batch_size,
            history_capacity=history_capacity,
            flush_timeout=flush_timeout,
            blocking=blocking,
            ack_timeout=ack_timeout,
        )
        self.adversary = adversary or AdversaryMode.honest()
        self.link_rules = dict(links or {})
        self.monitor_sync = monitor_sync
        self.pull_period = pull_period
        self.client_timeout = client_timeout
        self.log_path = log_path
        self.rng = random.Random(seed)
        self.interposers: dict[str, Interposer] = {}
        self._closers: list = []
        self._sources: list[DataSource] = []
        self._clients: list[Client] = []

    # -- lifecycle ---------------------------------------------------------

    async def _route(self, link: str, target: tuple[str, int]) -> tuple[str, int]:
        if link not in self.link_rules:
            return target
        ip = Interposer(target, self.link_rules[link], name=link)
        addr = await ip.start()
        self.interposers[link] = ip
        self._closers.append(ip.close)
        return addr

    async def start(self) -> "Deployment":
        self.db = DatabaseHost(self.adversary, log_path=self.log_path, seed=self.rng.randrange(2**32))
        self.db_server = DatabaseServer(self.db)
        self.db_address = await self.db_server.start()
        self._closers.append(self.db_server.close)

        self.tee = Tee(self.ids.tee_registry(), self.ids.authority, self.ids.measurement, self.config, keep_export_log=True)
        self.tee_server = TeeServer(self.tee, await self._route("tee-db", self.db_address))
        self.tee_address = await self.tee_server.start()
        self._closers.append(self.tee_server.close)

        monitor_id, monitor_key = next(iter(self.ids.monitors.items()))
        self._monitor_reader = TcpDatabaseReader(*await self._route("monitor-db", self.db_address), monitor_id)
        self._closers.append(self._monitor_reader.close)
        self.monitor = Monitor(monitor_key, monitor_id, self._monitor_reader, self.pull_period)
        self.monitor_server = MonitorServer(self.monitor, sync=self.monitor_sync)
        self.monitor_address = await self.monitor_server.start()
        self._closers.append(self.monitor_server.close)

        self.source_tee_address = await self._route("source-tee", self.tee_address)
        self.client_tee_address = await self._route("client-tee", self.tee_address)
        self.client_monitor_address = await self._route("client-monitor", self.monitor_address)
        self._filler = DataSource(self._source_key(), self._source_id(), self.tee_address)
        return self

    async def close(self) -> None:
        for conn in [*self._sources, *self._clients, self._filler]:
            await conn.close()
        for closer in reversed(self._closers):
            await closer()
        self.db.close()

    async def __aenter__(self) -> "Deployment":
        return await self.start()

    async def __aexit__(self, *exc: object) -> None:
        await self.close()

    # -- roles -------------------------------------------------------------

    def _source_id(self) -> str:
        return next(iter(self.ids.sources))

    def _source_key(self, key_id: str | None = None) -> PrivateKey:
        return self.ids.sources[key_id or self._source_id()]

    def source(self, key_id: str | None = None, direct: bool = False) -> DataSource:
        addr = self.tee_address if direct else self.source_tee_address
        src = DataSource(self._source_key(key_id), key_id or self._source_id(), addr, timeout=self.client_timeout)
        self._sources.append(src)
        return src

    def client(self, direct: bool = False) -> Client:
        c = Client(
            self.ids.client_registry(),
            self.monitor_address if direct else self.client_monitor_address,
            self.tee_address if direct else self.client_tee_address,
            timeout=self.client_timeout,
        )
        self._clients.append(c)
        return c

    def random_payload(self, lo: int = 16, hi: int = 64) -> bytes:
        return self.rng.randbytes(self.rng.randint(lo, hi))

    # -- driving the system --------------------------------------------------

    async def fill(self, count: int) -> list[HandoverPackage]:
        """Submit ``count`` random filler items straight to the TEE."""
        out = []
        for _ in range(count):
            out.append(await self._filler.source_submit(self.random_payload()))
        return out

    async def complete_batch(self) -> None:
        """Top up the partially filled batch so it gets exported."""
        missing = (-len(self.tee.buffer)) % self.config.batch_size
        await self.fill(missing)

    async def push_batches(self, k: int, wait: bool = True) -> None:
        """Complete the current batch, then add ``k`` more full batches."""
        await self.complete_batch()
        await self.fill(k * self.config.batch_size)
        if wait:
            await self.wait_exported()

    async def wait_exported(self, timeout: float = 10.0) -> None:
        await self.tee.wait_processed(self.tee.sealed_batches, timeout)

    async def sync_monitor(self) -> tuple[bytes, int]:
        return await self.monitor.pull_and_fold()

    def database_fold(self, view: str = "A") -> bytes:
        return fold(bytes(32), self.db.views[view].items())

    def db_contains(self, payload: bytes) -> bool:
        return self.db.contains(payload)


def signed_items(key: PrivateKey, key_id: str, payloads: Iterable[bytes]) -> list[DataItem]:
    return [sign_item(key, key_id, p) for p in payloads]
