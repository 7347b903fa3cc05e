"""Command-line entry points.

``gyokuro keygen`` performs the trusted setup; ``serve-db``, ``serve-tee``
and ``serve-monitor`` run the three services; ``submit``, ``handover`` and
``test`` are the source and client sides; ``bench`` and ``attack`` drive
the harnesses.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from pathlib import Path

from . import attacks, bench
from .clients import DataSource, HandoverPackage, Outcome, client_membership_test, client_verify_handover
from .config import GyokuroConfig, generate_keys, load_authority, load_private, load_trust, read_apk
from .core import KeyRegistry
from .database import AdversaryMode, DatabaseHost, DatabaseServer
from .monitor import Monitor, MonitorServer, TcpDatabaseReader
from .tee import Tee, TeeServer
from .wire import parse_address

EXIT_CODES = {
    Outcome.ACCEPTED: 0,
    Outcome.RETRY_LATER: 3,
    Outcome.REJECTED_SOURCE: 4,
    Outcome.REJECTED_SERVER: 5,
}


def _config(args: argparse.Namespace) -> GyokuroConfig:
    return GyokuroConfig.load(getattr(args, "config", None))


async def _serve_forever(server, label: str, listen: tuple[str, int]) -> None:
    host, port = await server.start(*listen)
    print(f"{label} listening on {host}:{port}", flush=True)
    try:
        await asyncio.Event().wait()
    finally:
        await server.close()


def cmd_keygen(args: argparse.Namespace) -> int:
    trust = generate_keys(args.out, args.sources, args.monitors)
    print(f"wrote keys to {args.out}")
    print(f"APK {trust['apk']}")
    print(f"EM  {trust['em']}")
    return 0


def cmd_serve_db(args: argparse.Namespace) -> int:
    cfg = _config(args)
    adversary = AdversaryMode.parse(args.adversary) if args.adversary else cfg.adversary
    db = DatabaseHost(adversary, log_path=args.log or cfg.db_log)
    listen = parse_address(args.listen or cfg.db)
    print(f"database adversary mode: {adversary.mode}", flush=True)
    try:
        asyncio.run(_serve_forever(DatabaseServer(db), "database", listen))
    finally:
        db.close()
    return 0


def cmd_serve_tee(args: argparse.Namespace) -> int:
    cfg = _config(args)
    registry = load_trust(cfg.keys)
    tee = Tee(registry, load_authority(cfg.keys), registry.expected_measurement, cfg.tee_config())
    db_addr = parse_address(args.db or cfg.db)
    asyncio.run(_serve_forever(TeeServer(tee, db_addr), "tee", parse_address(args.listen or cfg.tee)))
    return 0


def cmd_serve_monitor(args: argparse.Namespace) -> int:
    cfg = _config(args)
    key = load_private(cfg.keys, "monitors", cfg.monitor_id)
    db_addr = parse_address(args.db or cfg.db)

    async def run() -> None:
        reader = TcpDatabaseReader(*db_addr, cfg.monitor_id)
        monitor = Monitor(key, cfg.monitor_id, reader, cfg.pull_period)
        try:
            await _serve_forever(MonitorServer(monitor, sync=True), "monitor", parse_address(args.listen or cfg.monitor))
        finally:
            await reader.close()

    asyncio.run(run())
    return 0


def cmd_submit(args: argparse.Namespace) -> int:
    cfg = _config(args)
    source_id = args.source_id or cfg.source_id
    key = load_private(cfg.keys, "sources", source_id)
    payload = Path(args.payload_file).read_bytes()

    async def run() -> HandoverPackage:
        src = DataSource(key, source_id, parse_address(args.tee or cfg.tee))
        try:
            return await src.source_submit(payload)
        finally:
            await src.close()

    pkg = asyncio.run(run())
    pkg.save(args.out)
    print(f"submitted {len(payload)} bytes; cnt_por={pkg.por.cnt_por}; package written to {args.out}")
    return 0


def _client_registry(args: argparse.Namespace) -> KeyRegistry:
    if args.apk and args.em:
        return KeyRegistry(apk=read_apk(args.apk), expected_measurement=bytes.fromhex(args.em))
    if args.apk or args.em:
        raise SystemExit("--apk and --em go together")
    return load_trust(_config(args).keys)


def cmd_handover(args: argparse.Namespace) -> int:
    pkg = HandoverPackage.load(args.pkg)
    bad = client_verify_handover(pkg, _client_registry(args))
    if bad is not None:
        print(f"handover rejected: {bad}")
        return EXIT_CODES[bad.outcome]
    pkg.save(args.out)
    print(f"handover package for cnt_por={pkg.por.cnt_por} written to {args.out}")
    return 0


def cmd_test(args: argparse.Namespace) -> int:
    cfg = _config(args)
    pkg = HandoverPackage.load(args.pkg)
    verdict = asyncio.run(
        client_membership_test(
            pkg,
            parse_address(args.monitor or cfg.monitor),
            parse_address(args.tee or cfg.tee),
            _client_registry(args),
            timeout=args.timeout,
        )
    )
    print(verdict)
    return EXIT_CODES[verdict.outcome]


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _config(args).bench
    overrides = {}
    if args.levels:
        overrides["levels"] = args.levels
    for name in ("iterations", "duration", "payload_size"):
        if getattr(args, name) is not None:
            overrides[name] = getattr(args, name)
    if overrides:
        cfg = bench.BenchConfig(**{**cfg.__dict__, **overrides})

    async def run() -> int:
        if args.what == "scaling":
            rows = await bench.scaling_probe(args.sizes, cfg, concurrency=cfg.levels[0])
            for r in rows:
                print(
                    f"size {r.database_size:>9d}  upload {r.upload_median_ms:8.3f} ms (x{r.upload_ratio:.2f})  "
                    f"testing {r.testing_median_ms:8.3f} ms (x{r.testing_ratio:.2f})"
                )
            if args.csv:
                bench.write_scaling_csv(rows, args.csv)
            return 0
        async with bench.BenchServices(cfg.batch_size, cfg.seed, in_process=args.in_process) as svc:
            if args.what == "upload":
                report = await bench.bench_upload(cfg, svc)
            elif args.what == "testing":
                report = await bench.bench_testing(cfg, svc)
            else:
                report = await bench.bench_throughput(args.kind, cfg, svc, clients=args.clients)
        print(report.summary())
        if args.csv:
            report.write_csv(args.csv)
        return 0

    return asyncio.run(run())


def cmd_attack(args: argparse.Namespace) -> int:
    if args.action == "list":
        for s in attacks.scenario_catalog():
            print(f"{s.name:30s} {s.threat:9s} {s.expected.value:20s} {s.setup}")
        return 0
    if args.action == "run":
        if not args.name:
            raise SystemExit("attack run needs a scenario name")
        control = None if args.both else args.control
        results = asyncio.run(attacks.run_catalog([args.seed], control=control, names=[args.name]))
    else:
        control = None if args.both else args.control
        results = asyncio.run(attacks.run_catalog(range(args.seeds), control=control))
    for r in results:
        print(r.line())
        if args.verbose:
            for a in r.attempts:
                print(f"    {a}")
    if args.junit:
        attacks.write_junit(results, args.junit)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gyokuro", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp: argparse.ArgumentParser) -> argparse.ArgumentParser:
        sp.add_argument("--config", help="JSON config file")
        return sp

    k = sub.add_parser("keygen", help="generate authority, source and monitor keys")
    k.add_argument("--out", default="keys")
    k.add_argument("--sources", nargs="+", default=["source-1"])
    k.add_argument("--monitors", nargs="+", default=["monitor-1"])
    k.set_defaults(func=cmd_keygen)

    d = with_config(sub.add_parser("serve-db", help="run the database host"))
    d.add_argument("--listen")
    d.add_argument("--adversary", help="e.g. drop_batch:3, fork:monitor-1=B:2")
    d.add_argument("--log", help="append-only item log file")
    d.set_defaults(func=cmd_serve_db)

    t = with_config(sub.add_parser("serve-tee", help="run the TEE server"))
    t.add_argument("--listen")
    t.add_argument("--db")
    t.set_defaults(func=cmd_serve_tee)

    m = with_config(sub.add_parser("serve-monitor", help="run the monitor"))
    m.add_argument("--listen")
    m.add_argument("--db")
    m.set_defaults(func=cmd_serve_monitor)

    s = with_config(sub.add_parser("submit", help="sign and submit a payload"))
    s.add_argument("--payload-file", required=True)
    s.add_argument("--out", default="pkg.bin")
    s.add_argument("--tee")
    s.add_argument("--source-id")
    s.set_defaults(func=cmd_submit)

    for name, helptext, func in (
        ("handover", "check a received package and store it", cmd_handover),
        ("test", "run a membership test", cmd_test),
    ):
        c = with_config(sub.add_parser(name, help=helptext))
        c.add_argument("--pkg", required=True)
        c.add_argument("--apk", help="APK file (raw point, hex, or trust.json)")
        c.add_argument("--em", help="expected measurement, hex")
        if name == "handover":
            c.add_argument("--out", required=True)
        else:
            c.add_argument("--monitor")
            c.add_argument("--tee")
            c.add_argument("--timeout", type=float, default=5.0)
        c.set_defaults(func=func)

    b = with_config(sub.add_parser("bench", help="latency / throughput benchmarks"))
    b.add_argument("what", choices=("upload", "testing", "throughput", "scaling"))
    b.add_argument("--levels", type=int, nargs="+")
    b.add_argument("--iterations", type=int)
    b.add_argument("--duration", type=float)
    b.add_argument("--payload-size", type=int)
    b.add_argument("--kind", choices=bench.THROUGHPUT_KINDS, default="upload")
    b.add_argument("--clients", type=int)
    b.add_argument("--sizes", type=int, nargs="+", default=[1000, 100000])
    b.add_argument("--csv")
    b.add_argument("--in-process", action="store_true", help="run services in this process")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("attack", help="attack scenarios")
    a.add_argument("action", choices=("list", "run", "all"))
    a.add_argument("name", nargs="?")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--control", action="store_true", help="honest control run instead")
    a.add_argument("--both", action="store_true", help="attack and control runs")
    a.add_argument("--junit")
    a.set_defaults(func=cmd_attack)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
