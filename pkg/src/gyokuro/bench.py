"""Latency and throughput benchmarks.

The services (database host, TEE, monitor) run in a child process that
stands in for the server machine; the load generator runs in the calling
process.  Latencies are wall-clock round trips on the monotonic clock.

One latency *data point* is the mean round trip of the ``c`` concurrent
requests of one iteration, so a run over 7 levels x 50 iterations yields
350 points.  Outliers are removed per level with the 1.5 x IQR rule.
"""

from __future__ import annotations

import asyncio
import csv
import multiprocessing as mp
import os
import random
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from .clients import Client, DataSource, HandoverPackage
from .core import (
    DataItem,
    KeyRegistry,
    load_private_pem,
    load_public,
    private_pem,
    public_bytes,
    sign_item,
)
from .deploy import Identities
from .monitor import LocalDatabaseReader, Monitor, MonitorServer
from .tee import Tee, TeeConfig, TeeServer
from .database import DatabaseHost, DatabaseServer

DEFAULT_LEVELS = (16, 32, 64, 128, 256, 512, 1024)
KINDS = ("upload", "testing")
THROUGHPUT_KINDS = ("upload", "pop")


@dataclass
class BenchConfig:
    levels: list[int] = field(default_factory=lambda: list(DEFAULT_LEVELS))
    iterations: int = 50
    payload_size: int = 4900
    duration: float = 5.0
    iqr_multiplier: float = 1.5
    batch_size: int = 32
    throughput_clients: int = 2048
    window: float = 0.25
    warmup: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.levels:
            raise ValueError("at least one concurrency level is required")
        if any(not isinstance(c, int) or c <= 0 for c in self.levels):
            raise ValueError(f"concurrency levels must be positive integers, got {self.levels}")
        self.levels = sorted(set(self.levels))
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.payload_size < 0:
            raise ValueError("payload size must be non-negative")
        if self.duration <= 0 or self.window <= 0 or self.window > self.duration:
            raise ValueError("need 0 < window <= duration")
        if self.iqr_multiplier <= 0:
            raise ValueError("IQR multiplier must be positive")
        if self.throughput_clients <= 0 or self.batch_size <= 0:
            raise ValueError("client count and batch size must be positive")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BenchConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def iqr_bounds(values: Sequence[float], k: float = 1.5) -> tuple[float, float]:
    q1, q3 = np.percentile(np.asarray(values, dtype=float), [25, 75])
    spread = q3 - q1
    return float(q1 - k * spread), float(q3 + k * spread)


def iqr_filter(values: Sequence[float], k: float = 1.5) -> tuple[list[float], list[bool]]:
    """Values inside ``[Q1 - k*IQR, Q3 + k*IQR]`` and the per-value outlier mask."""
    if len(values) == 0:
        return [], []
    lo, hi = iqr_bounds(values, k)
    mask = [not (lo <= v <= hi) for v in values]
    return [v for v, out in zip(values, mask) if not out], mask


def outlier_fraction(filtered: int, total: int) -> float:
    return filtered / total if total else 0.0


@dataclass
class LevelStats:
    concurrency: int
    samples: list[float]
    outlier_mask: list[bool]
    mean: float
    median: float
    stdev: float
    unit: str = "ms"

    @property
    def total(self) -> int:
        return len(self.samples)

    @property
    def outliers(self) -> int:
        return sum(self.outlier_mask)

    @property
    def outlier_fraction(self) -> float:
        return outlier_fraction(self.outliers, self.total)

    @classmethod
    def from_samples(cls, concurrency: int, samples: list[float], k: float, unit: str = "ms") -> "LevelStats":
        kept, mask = iqr_filter(samples, k)
        kept = kept or samples
        return cls(
            concurrency,
            samples,
            mask,
            statistics.fmean(kept),
            statistics.median(kept),
            statistics.stdev(kept) if len(kept) > 1 else 0.0,
            unit,
        )


@dataclass
class BenchReport:
    kind: str
    levels: list[LevelStats]
    database_size: int
    cores: int = field(default_factory=lambda: os.cpu_count() or 1)
    failures: int = 0

    @property
    def total_points(self) -> int:
        return sum(s.total for s in self.levels)

    @property
    def total_outliers(self) -> int:
        return sum(s.outliers for s in self.levels)

    @property
    def outlier_fraction(self) -> float:
        return outlier_fraction(self.total_outliers, self.total_points)

    def level(self, concurrency: int) -> LevelStats:
        for s in self.levels:
            if s.concurrency == concurrency:
                return s
        raise KeyError(concurrency)

    # Throughput reports keep one level per client count; samples are
    # per-window rates in requests/sec.
    def rate(self, concurrency: int | None = None) -> float:
        s = self.levels[-1] if concurrency is None else self.level(concurrency)
        return s.mean

    def rate_per_core(self, concurrency: int | None = None) -> float:
        return self.rate(concurrency) / self.cores

    def summary(self) -> str:
        lines = [f"{self.kind}: database size {self.database_size}, {self.cores} logical core(s)"]
        for s in self.levels:
            extra = f" ({s.mean / self.cores:.1f}/s/core)" if s.unit == "req/s" else ""
            lines.append(
                f"  c={s.concurrency:5d}  mean {s.mean:9.3f} {s.unit}{extra}  median {s.median:9.3f}  "
                f"sd {s.stdev:8.3f}  outliers {s.outliers}/{s.total} ({100 * s.outlier_fraction:.1f}%)"
            )
        lines.append(f"  total outliers {self.total_outliers}/{self.total_points} ({100 * self.outlier_fraction:.1f}%)")
        if self.failures:
            lines.append(f"  failed requests: {self.failures}")
        return "\n".join(lines)

    def write_csv(self, path: str | os.PathLike[str]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "concurrency", "sample", "value", "unit", "outlier", "database_size"])
            for s in self.levels:
                for i, (v, out) in enumerate(zip(s.samples, s.outlier_mask)):
                    w.writerow([self.kind, s.concurrency, i, f"{v:.6f}", s.unit, int(out), self.database_size])

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["outlier_fraction"] = self.outlier_fraction
        return d


# ---------------------------------------------------------------------------
# Demand arithmetic for a certificate-transparency deployment
# ---------------------------------------------------------------------------


def ct_submission_rate(certs_per_hour: float = 460_000) -> float:
    """Upload demand in items/sec."""
    return certs_per_hour / 3600


def ct_testing_demand(clients: int = 2048, pages_per_day: float = 163, rate_decimals: int | None = None) -> float:
    """Membership tests/sec for ``clients`` users.

    ``rate_decimals`` rounds the per-user rate before scaling; with 3
    decimals 163/day becomes 0.002/s and the total 4.096/s, against an
    exact 3.86/s.
    """
    per_user = pages_per_day / 86_400
    if rate_decimals is not None:
        per_user = round(per_user, rate_decimals)
    return clients * per_user


# ---------------------------------------------------------------------------
# Services
# ---------------------------------------------------------------------------


def _dummy_batches(count: int, batch_size: int, payload_size: int, seed: int) -> list[list[DataItem]]:
    # Preloaded rows only need to occupy the store; the TEE never re-verifies them.
    rng = random.Random(seed)
    sig = bytes(64)
    items = [DataItem(rng.randbytes(payload_size), sig, "preload") for _ in range(count)]
    return [items[i : i + batch_size] for i in range(0, count, batch_size)]


class _Stack:
    """Database host, TEE and monitor of one server machine."""

    def __init__(self, batch_size: int, seed: int) -> None:
        self.ids = Identities()
        self.batch_size = batch_size
        self.seed = seed

    async def start(self) -> dict[str, Any]:
        self.db = DatabaseHost(seed=self.seed)
        self.db_server = DatabaseServer(self.db)
        db_addr = await self.db_server.start()
        self.tee = Tee(self.ids.tee_registry(), self.ids.authority, self.ids.measurement, TeeConfig(batch_size=self.batch_size, flush_timeout=None))
        self.tee_server = TeeServer(self.tee, db_addr)
        tee_addr = await self.tee_server.start()
        monitor_id, monitor_key = next(iter(self.ids.monitors.items()))
        self.monitor = Monitor(monitor_key, monitor_id, LocalDatabaseReader(self.db, monitor_id))
        self.monitor_server = MonitorServer(self.monitor, sync=False)
        monitor_addr = await self.monitor_server.start()
        source_id, source_key = next(iter(self.ids.sources.items()))
        return {
            "tee": tee_addr,
            "monitor": monitor_addr,
            "apk": public_bytes(self.ids.authority.apk),
            "em": self.ids.measurement,
            "monitor_keys": {k: public_bytes(v) for k, v in self.ids.monitors.items()},
            "source_id": source_id,
            "source_pem": private_pem(source_key),
        }

    async def command(self, name: str, *args: Any) -> Any:
        if name == "preload":
            count, payload_size = args
            batches = _dummy_batches(count, self.batch_size, payload_size, self.seed)
            self.db.bulk_load(batches)
            self.tee.fast_forward(batches)
            return len(self.db.log)
        if name == "settle":
            # Seal the partial batch, wait for export, let the monitor catch up.
            self.tee.flush()
            await self.tee.wait_processed(self.tee.sealed_batches, timeout=60)
            await self.monitor.pull_and_fold()
            return self.monitor.synced_position
        if name == "stats":
            return {"db_size": len(self.db.log), "cnt": self.tee.cnt, "sealed": self.tee.sealed_batches}
        raise ValueError(f"unknown service command {name!r}")

    async def close(self) -> None:
        for closer in (self.monitor_server.close, self.tee_server.close, self.db_server.close):
            await closer()


def _service_main(conn: Any, batch_size: int, seed: int) -> None:
    async def main() -> None:
        stack = _Stack(batch_size, seed)
        conn.send(await stack.start())
        loop = asyncio.get_running_loop()
        while True:
            name, args = await loop.run_in_executor(None, conn.recv)
            if name == "stop":
                break
            try:
                conn.send(("ok", await stack.command(name, *args)))
            except Exception as exc:  # reported to the parent, which re-raises
                conn.send(("error", repr(exc)))
        await stack.close()
        conn.send(("ok", None))

    asyncio.run(main())


class BenchServices:
    """Honest services for benchmarking, in a child process by default."""

    def __init__(self, batch_size: int = 32, seed: int = 0, in_process: bool = False) -> None:
        self.batch_size = batch_size
        self.seed = seed
        self.in_process = in_process
        self._stack: _Stack | None = None
        self._proc: Any = None
        self._conn: Any = None

    async def start(self) -> "BenchServices":
        if self.in_process:
            self._stack = _Stack(self.batch_size, self.seed)
            info = await self._stack.start()
        else:
            ctx = mp.get_context("spawn")
            self._conn, child = ctx.Pipe()
            self._proc = ctx.Process(target=_service_main, args=(child, self.batch_size, self.seed), daemon=True)
            self._proc.start()
            child.close()  # so a crashed child surfaces as EOFError instead of a hang
            info = await asyncio.get_running_loop().run_in_executor(None, self._recv, 60.0)
        self.tee_address = tuple(info["tee"])
        self.monitor_address = tuple(info["monitor"])
        self.registry = KeyRegistry(
            apk=load_public(info["apk"]),
            expected_measurement=info["em"],
            monitor_keys={k: load_public(v) for k, v in info["monitor_keys"].items()},
        )
        self.source_id = info["source_id"]
        self.source_key = load_private_pem(info["source_pem"])
        return self

    async def command(self, name: str, *args: Any) -> Any:
        if self._stack is not None:
            return await self._stack.command(name, *args)
        loop = asyncio.get_running_loop()
        self._conn.send((name, args))
        status, value = await loop.run_in_executor(None, self._recv, None)
        if status != "ok":
            raise RuntimeError(f"service command {name} failed: {value}")
        return value

    def _recv(self, timeout: float | None) -> Any:
        if timeout is not None and not self._conn.poll(timeout):
            raise TimeoutError("benchmark services did not respond")
        return self._conn.recv()

    async def preload(self, items: int, payload_size: int = 64) -> int:
        return await self.command("preload", items, payload_size) if items else 0

    async def settle(self) -> int:
        return await self.command("settle")

    async def database_size(self) -> int:
        return (await self.command("stats"))["db_size"]

    async def close(self) -> None:
        if self._stack is not None:
            await self._stack.close()
            return
        if self._proc is not None:
            loop = asyncio.get_running_loop()
            self._conn.send(("stop", ()))
            await loop.run_in_executor(None, self._conn.recv)
            await loop.run_in_executor(None, self._proc.join, 10)
            self._proc = None

    async def __aenter__(self) -> "BenchServices":
        return await self.start()

    async def __aexit__(self, *exc: object) -> None:
        await self.close()


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------


async def _timed(coro: Any) -> float:
    start = time.perf_counter()
    await coro
    return (time.perf_counter() - start) * 1000.0


async def _upload_level(svc: BenchServices, cfg: BenchConfig, c: int, rng: random.Random) -> tuple[list[float], int]:
    sources = [DataSource(svc.source_key, svc.source_id, svc.tee_address, timeout=60) for _ in range(c)]
    points, failures = [], 0
    try:
        for it in range(cfg.warmup + cfg.iterations):
            # Signing is the source's job before the round trip; not timed.
            items = [sign_item(svc.source_key, svc.source_id, rng.randbytes(cfg.payload_size)) for _ in range(c)]
            results = await asyncio.gather(
                *(_timed(s.submit_item(item)) for s, item in zip(sources, items)), return_exceptions=True
            )
            ok = [r for r in results if isinstance(r, float)]
            failures += c - len(ok)
            if it >= cfg.warmup and ok:
                points.append(statistics.fmean(ok))
    finally:
        for s in sources:
            await s.close()
    return points, failures


async def bench_upload(cfg: BenchConfig, services: BenchServices | None = None) -> BenchReport:
    """SUBMIT round-trip latency per concurrency level."""
    rng = random.Random(cfg.seed)
    own = services is None
    svc = services or await BenchServices(cfg.batch_size, cfg.seed).start()
    try:
        levels, failures = [], 0
        for c in cfg.levels:
            points, failed = await _upload_level(svc, cfg, c, rng)
            failures += failed
            levels.append(LevelStats.from_samples(c, points, cfg.iqr_multiplier))
        return BenchReport("upload", levels, await svc.database_size(), failures=failures)
    finally:
        if own:
            await svc.close()


async def prepare_packages(svc: BenchServices, count: int, payload_size: int, rng: random.Random) -> list[HandoverPackage]:
    src = DataSource(svc.source_key, svc.source_id, svc.tee_address, timeout=60)
    try:
        pkgs = [await src.source_submit(rng.randbytes(payload_size)) for _ in range(count)]
    finally:
        await src.close()
    # One extra batch on top so every package sits strictly below cnt_pop.
    src = DataSource(svc.source_key, svc.source_id, svc.tee_address, timeout=60)
    try:
        for _ in range(svc.batch_size):
            await src.source_submit(rng.randbytes(16))
    finally:
        await src.close()
    await svc.settle()
    return pkgs


async def _testing_level(svc: BenchServices, cfg: BenchConfig, c: int, pkgs: list[HandoverPackage]) -> tuple[list[float], int]:
    clients = [Client(svc.registry, svc.monitor_address, svc.tee_address, timeout=60) for _ in range(c)]
    points, failures = [], 0
    try:
        # The checkpoint is fetched before timing starts.
        checkpoint = await clients[0].fetch_checkpoint()

        async def one(client: Client, pkg: HandoverPackage) -> float:
            start = time.perf_counter()
            verdict = await client.membership_test(pkg, checkpoint)
            elapsed = (time.perf_counter() - start) * 1000.0
            if not verdict.accepted:
                raise RuntimeError(str(verdict))
            return elapsed

        for it in range(cfg.warmup + cfg.iterations):
            results = await asyncio.gather(
                *(one(cl, pkgs[(it * c + i) % len(pkgs)]) for i, cl in enumerate(clients)), return_exceptions=True
            )
            ok = [r for r in results if isinstance(r, float)]
            failures += c - len(ok)
            if it >= cfg.warmup and ok:
                points.append(statistics.fmean(ok))
    finally:
        for cl in clients:
            await cl.close()
    return points, failures


async def bench_testing(cfg: BenchConfig, services: BenchServices | None = None, package_pool: int = 256) -> BenchReport:
    """Full membership test latency (POR, report, POP fetch and POP check)."""
    rng = random.Random(cfg.seed)
    own = services is None
    svc = services or await BenchServices(cfg.batch_size, cfg.seed).start()
    try:
        pkgs = await prepare_packages(svc, package_pool, cfg.payload_size, rng)
        levels, failures = [], 0
        for c in cfg.levels:
            points, failed = await _testing_level(svc, cfg, c, pkgs)
            failures += failed
            levels.append(LevelStats.from_samples(c, points, cfg.iqr_multiplier))
        return BenchReport("testing", levels, await svc.database_size(), failures=failures)
    finally:
        if own:
            await svc.close()


def window_rates(stamps: Sequence[float], start: float, duration: float, window: float) -> list[float]:
    """Completions per second in consecutive windows of ``[start, start + duration)``."""
    n = max(1, int(round(duration / window)))
    counts = [0] * n
    for t in stamps:
        i = int((t - start) / window)
        if 0 <= i < n:
            counts[i] += 1
    return [k / window for k in counts]


async def bench_throughput(kind: str, cfg: BenchConfig, services: BenchServices | None = None, clients: int | None = None) -> BenchReport:
    """``clients`` sessions issue back-to-back requests for ``cfg.duration`` seconds.

    Samples are per-window completion rates; the reported rate is their
    IQR-filtered mean, and the per-core figure divides by the logical
    core count.
    """
    if kind not in THROUGHPUT_KINDS:
        raise ValueError(f"throughput kind must be one of {THROUGHPUT_KINDS}")
    c = clients or cfg.throughput_clients
    rng = random.Random(cfg.seed)
    own = services is None
    svc = services or await BenchServices(cfg.batch_size, cfg.seed).start()
    stamps: list[float] = []
    failures = 0
    try:
        if kind == "upload":
            # Items are signed up front and reused; resubmission is legal.
            pool = [sign_item(svc.source_key, svc.source_id, rng.randbytes(cfg.payload_size)) for _ in range(min(c, 512))]
            sessions: list[Any] = [DataSource(svc.source_key, svc.source_id, svc.tee_address, timeout=60) for _ in range(c)]
        else:
            pkgs = await prepare_packages(svc, 1, 16, rng)
            sessions = [Client(svc.registry, svc.monitor_address, svc.tee_address, timeout=60) for _ in range(c)]
            checkpoint = await sessions[0].fetch_checkpoint()
        stop = asyncio.Event()

        async def worker(i: int, session: Any) -> None:
            nonlocal failures
            k = i
            while not stop.is_set():
                try:
                    if kind == "upload":
                        await session.submit_item(pool[k % len(pool)])
                    else:
                        await session.request_pop(checkpoint)
                except Exception:
                    failures += 1
                    continue
                stamps.append(time.perf_counter())
                k += 1

        start = time.perf_counter()
        tasks = [asyncio.create_task(worker(i, s)) for i, s in enumerate(sessions)]
        await asyncio.sleep(cfg.duration)
        stop.set()
        await asyncio.gather(*tasks)
        for s in sessions:
            await s.close()
        rates = window_rates(stamps, start, cfg.duration, cfg.window)
        level = LevelStats.from_samples(c, rates, cfg.iqr_multiplier, unit="req/s")
        return BenchReport(f"throughput-{kind}", [level], await svc.database_size(), failures=failures)
    finally:
        if own:
            await svc.close()


@dataclass
class ScalingRow:
    database_size: int
    upload_median_ms: float
    testing_median_ms: float
    upload_ratio: float = 1.0
    testing_ratio: float = 1.0


async def scaling_probe(db_sizes: Sequence[int], cfg: BenchConfig | None = None, concurrency: int = 16) -> list[ScalingRow]:
    """Median upload and testing latency at each preloaded database size.

    Ratios are relative to the first (smallest) size.
    """
    cfg = cfg or BenchConfig(levels=[concurrency], iterations=30)
    cfg = BenchConfig(**{**asdict(cfg), "levels": [concurrency]})
    rows = []
    for size in sorted(db_sizes):
        async with BenchServices(cfg.batch_size, cfg.seed) as svc:
            await svc.preload(size)
            if await svc.database_size() != size:
                raise RuntimeError("preload did not reach the requested size")
            up = await bench_upload(cfg, svc)
            await svc.settle()
            te = await bench_testing(cfg, svc)
            rows.append(ScalingRow(size, up.level(concurrency).median, te.level(concurrency).median))
    base = rows[0]
    for r in rows:
        r.upload_ratio = r.upload_median_ms / base.upload_median_ms
        r.testing_ratio = r.testing_median_ms / base.testing_median_ms
    return rows


def write_scaling_csv(rows: Sequence[ScalingRow], path: str | os.PathLike[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["database_size", "upload_median_ms", "testing_median_ms", "upload_ratio", "testing_ratio"])
        for r in rows:
            w.writerow([r.database_size, f"{r.upload_median_ms:.6f}", f"{r.testing_median_ms:.6f}", f"{r.upload_ratio:.4f}", f"{r.testing_ratio:.4f}"])
