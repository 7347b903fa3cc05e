"""Scripted attack scenarios against a live deployment.

Each scenario builds a deployment on loopback, runs an adversary script
(network interposers, a malicious database host, rogue TEEs/monitors,
a malicious data source) and checks the outcome the correctness analysis
predicts.  Every scenario also has an honest *control* run over the same
topology in which the targeted item must be accepted.

TEE rollback and TEE forking are not scenarios: state continuity and fork
detection are assumed properties of the TEE platform, so there is
nothing in this system to exercise.  See ``ASSUMED_TEE_PROPERTIES``.
"""

from __future__ import annotations

import asyncio
import enum
import random
import tempfile
import time
import traceback
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Awaitable, Callable, Iterable

from . import wire
from .clients import (
    Client,
    DataSource,
    EvidenceBundle,
    HandoverPackage,
    MembershipVerdict,
    Outcome,
    TransportError,
    verify_evidence,
)
from .core import (
    AttestationAuthority,
    ProofOfProcessing,
    ProofOfReception,
    fold,
    generate_key,
    pop_preimage,
    sign,
    sign_checkpoint,
)
from .database import AdversaryMode, DatabaseHost
from .deploy import Deployment
from .interposer import DOWN, UP, Rule
from .tee import LocalDatabaseLink, Tee, TeeServer
from .wire import Msg

ASSUMED_TEE_PROPERTIES = {
    "rollback": "TEE state rollback is prevented by the platform's rollback protection.",
    "state_continuity": "Crash/reboot state continuity is provided by the platform.",
    "fork": "Intra- and inter-machine TEE forks are detected by the platform.",
    "side_channels": "Signing-key operations do not leak through side channels.",
}

BATCH = 4
_DETECTED = (Outcome.REJECTED_SOURCE, Outcome.REJECTED_SERVER)


class Expected(str, enum.Enum):
    DETECTED = "detected"
    NEVER_ACCEPTS = "never_accepts"
    HARMLESS_ACCEPT = "harmless_accept"
    EVIDENCE_AT_MONITOR = "evidence_at_monitor"


@dataclass
class Attempt:
    label: str
    payload: bytes
    verdict: MembershipVerdict | None
    possessed: bool
    expect: str | None = None  # detail prefix a detected attempt must show

    @property
    def detected(self) -> bool:
        if self.verdict is None or self.verdict.outcome not in _DETECTED:
            return False
        return self.expect is None or self.verdict.detail.startswith(self.expect)

    @property
    def accepted(self) -> bool:
        return self.verdict is not None and self.verdict.accepted

    def describe(self) -> str:
        return f"{self.label}: {self.verdict if self.verdict else 'no package'}"


class ScenarioEnv:
    """What a scenario script gets: RNG, mode and a deployment factory."""

    def __init__(self, seed: int, attack: bool, workdir: Path) -> None:
        self.seed = seed
        self.rng = random.Random(seed)
        self.attack = attack
        self.workdir = workdir
        self.attempts: list[Attempt] = []
        self.facts: dict[str, bool] = {}
        self._closers: list[Callable[[], Awaitable[None]]] = []

    async def deploy(
        self,
        adversary: AdversaryMode | None = None,
        links: dict[str, list[Rule]] | None = None,
        **kw: object,
    ) -> Deployment:
        # Control runs keep the topology (pass-through interposers) but no rules.
        links = links or {}
        if not self.attack:
            adversary, links = None, {name: [] for name in links}
        kw.setdefault("client_timeout", 1.0)
        kw.setdefault("ack_timeout", 0.5)
        dep = Deployment(
            batch_size=BATCH,
            adversary=adversary,
            links=links,
            seed=self.rng.randrange(2**32),
            **kw,  # type: ignore[arg-type]
        )
        await dep.start()
        self._closers.append(dep.close)
        return dep

    def closing(self, closer: Callable[[], Awaitable[None]]) -> None:
        self._closers.append(closer)

    async def attempt(
        self, label: str, dep: Deployment, client: Client, pkg: HandoverPackage | None, payload: bytes, expect: str | None = None
    ) -> Attempt:
        verdict = await client.membership_test(pkg) if pkg is not None else None
        possessed = dep.db_contains(payload) or dep.monitor.holds_item(payload)
        att = Attempt(label, payload, verdict, possessed, expect)
        self.attempts.append(att)
        return att

    def fact(self, name: str, value: bool) -> None:
        # Facts are the attack-specific claims; control runs do not assert them.
        if self.attack:
            self.facts[name] = bool(value)

    async def close(self) -> None:
        for closer in reversed(self._closers):
            try:
                await closer()
            except Exception:  # teardown must not mask the scenario outcome
                pass


Script = Callable[[ScenarioEnv], Awaitable[None]]


@dataclass(frozen=True)
class Scenario:
    name: str
    threat: str
    expected: Expected
    setup: str
    script: Script = field(repr=False)


@dataclass
class ScenarioResult:
    name: str
    seed: int
    control: bool
    status: str  # pass | fail | error
    expected: str
    message: str = ""
    attempts: list[str] = field(default_factory=list)
    facts: dict[str, bool] = field(default_factory=dict)
    no_false_accept: bool = True
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def line(self) -> str:
        mode = "control" if self.control else "attack"
        return f"[{self.status.upper()}] {self.name} seed={self.seed} {mode}: {self.message}"


# ---------------------------------------------------------------------------
# Helpers for scripts
# ---------------------------------------------------------------------------


def _cnt_offset(byte: int) -> Callable[[bytes], int]:
    """Body offset of byte ``byte`` of the counter after a len8-prefixed signature."""
    return lambda body: 8 + int.from_bytes(body[:8], "big") + byte


async def _submit_at(dep: Deployment, src: DataSource, batch: int, position: int, payload: bytes) -> HandoverPackage:
    """Submit filler until the next slot is (batch, position), then the payload."""
    target = batch * dep.config.batch_size + position
    current = dep.tee.sealed_batches * dep.config.batch_size + len(dep.tee.buffer)
    if target < current:
        raise RuntimeError("target slot already passed")
    await dep.fill(target - current)
    pkg = await src.source_submit(payload)
    if pkg.por.cnt_por != batch:
        raise RuntimeError(f"expected batch {batch}, got {pkg.por.cnt_por}")
    return pkg


async def _progress(dep: Deployment, batches: int = 1) -> None:
    await dep.push_batches(batches)
    await dep.sync_monitor()


async def _retry(env: ScenarioEnv, dep: Deployment, client: Client, pkg: HandoverPackage | None, payload: bytes, label: str, tries: int = 3) -> None:
    for i in range(tries):
        await env.attempt(f"{label} #{i + 1}", dep, client, pkg, payload)
        await _progress(dep)


class RoguePopServer:
    """Answers every POP_REQ with a large counter signed by a non-TEE key."""

    def __init__(self, cnt_pop: int = 2**40) -> None:
        self._key = generate_key()
        self.cnt_pop = cnt_pop
        self._server: asyncio.AbstractServer | None = None

    async def start(self) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._handle, "127.0.0.1", 0)
        return self._server.sockets[0].getsockname()[:2]

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                msg, _ = await wire.read_frame(reader)
                pop = ProofOfProcessing(sign(self._key, pop_preimage(self.cnt_pop)), self.cnt_pop)
                await wire.write_frame(writer, Msg.POP_OK, pop.encode())
        except (asyncio.IncompleteReadError, ConnectionError):
            pass
        finally:
            writer.close()

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()


async def _rogue_tee(dep: Deployment, steal_report: bool) -> tuple[Tee, tuple[str, int], Callable[[], Awaitable[None]]]:
    rogue = Tee(dep.ids.tee_registry(), AttestationAuthority(), dep.ids.measurement, dep.config)
    if steal_report:
        rogue.report = dep.tee.report
    rogue_db = DatabaseHost()
    rogue.link = LocalDatabaseLink(rogue_db, rogue)
    server = TeeServer(rogue)
    addr = await server.start()
    return rogue, addr, server.close


# ---------------------------------------------------------------------------
# Network adversary
# ---------------------------------------------------------------------------


async def tamper_messages(env: ScenarioEnv) -> None:
    rng = env.rng
    links = {
        "source-tee": [Rule("tamper", DOWN, Msg.SUBMIT_OK, 1, 1, offset=_cnt_offset(rng.randrange(8)), xor=rng.randrange(1, 256))],
        "client-tee": [
            Rule("tamper", UP, Msg.POP_REQ, 1, 1, offset=rng.randrange(32), xor=rng.randrange(1, 256)),
            Rule("tamper", DOWN, Msg.POP_OK, 1, 1, offset=_cnt_offset(rng.randrange(8)), xor=rng.randrange(1, 256)),
        ],
    }
    dep = await env.deploy(links=links)
    src, client = dep.source(), dep.client()
    d1, d2 = dep.random_payload(), dep.random_payload()
    pkg1 = await src.source_submit(d1)
    pkg2 = await src.source_submit(d2)
    await _progress(dep, 2)
    await env.attempt("POR counter tampered", dep, client, pkg1, d1, expect="por_signature")
    await env.attempt("checkpoint tampered", dep, client, pkg2, d2, expect="tee_error:CHECKPOINT_SIG_INVALID")
    await env.attempt("POP counter tampered", dep, client, pkg2, d2, expect="pop_signature")


async def drop_messages(env: ScenarioEnv) -> None:
    links = {
        "source-tee": [Rule("drop", DOWN, Msg.SUBMIT_OK, 1, 1)],
        "client-monitor": [Rule("drop", DOWN, Msg.CHECKPOINT, 1, 1)],
        "client-tee": [Rule("drop", DOWN, Msg.POP_OK, 1, 1)],
        "tee-db": [Rule("drop", UP, Msg.DB_STORE, 2, 2)],
    }
    dep = await env.deploy(links=links, client_timeout=0.4, ack_timeout=0.3)
    src, client = dep.source(), dep.client()
    d = dep.random_payload()
    try:
        pkg = await src.source_submit(d)
    except TransportError:
        await env.attempt("POR dropped", dep, client, None, d)
        pkg = await src.source_submit(d)  # the source simply retries
    await _progress(dep, 2)
    env.fact("store_drop_recovered", dep.tee.cnt >= 3)
    await env.attempt("checkpoint dropped", dep, client, pkg, d)
    await env.attempt("POP dropped", dep, client, pkg, d)


async def delay_swap_por(env: ScenarioEnv) -> None:
    links = {
        "source-tee": [
            Rule("capture", DOWN, Msg.SUBMIT_OK, 1, 1, slot="por1"),
            Rule("replay", DOWN, Msg.SUBMIT_OK, 2, 2, slot="por1"),
        ]
    }
    dep = await env.deploy(links=links)
    src, client = dep.source(), dep.client()
    d1, d2 = dep.random_payload(), dep.random_payload()
    pkg1 = await src.source_submit(d1)
    await _progress(dep, 1)  # monitor now sits between the two PORs
    pkg2 = await src.source_submit(d2)
    monitored = dep.tee.cnt - 1  # cnt_pop the current checkpoint yields
    env.fact("por_counters_straddle", pkg1.por.cnt_por < monitored < dep.tee.sealed_batches)
    env.fact("swapped_por_delivered", pkg2.por == pkg1.por)
    await _progress(dep, 1)
    await env.attempt("d2 with delayed POR of d1", dep, client, pkg2, d2, expect="por_signature")


async def replay_por_other_item(env: ScenarioEnv) -> None:
    dep = await env.deploy()
    src, client = dep.source(), dep.client()
    other, target = dep.random_payload(), dep.random_payload()
    pkg_other = await src.source_submit(other)
    if env.attack:
        # Malicious source: never submits the target, reuses an older POR.
        pkg = HandoverPackage(src.make_item(target), pkg_other.por)
    else:
        pkg = await src.source_submit(target)
    await _progress(dep, 2)
    await env.attempt("target with POR of another item", dep, client, pkg, target, expect="por_signature")


async def replay_submission_same_item(env: ScenarioEnv) -> None:
    links = {"source-tee": [Rule("capture", UP, Msg.SUBMIT, 1, 1, slot="sub")]}
    dep = await env.deploy(links=links)
    src, client = dep.source(), dep.client()
    d = dep.random_payload()
    pkg1 = await src.source_submit(d)
    await dep.push_batches(1)
    if env.attack:
        msg, body = await dep.interposers["source-tee"].replay("sub")
        por2 = ProofOfReception.decode(body) if msg == Msg.SUBMIT_OK else None
        env.fact("second_por_issued", por2 is not None and por2.cnt_por > pkg1.por.cnt_por)
    await _progress(dep, 1)
    copies = sum(1 for it in dep.db.log.items() if it.payload == d)
    env.fact("stored_twice", copies == 2)
    await env.attempt("earlier POR of replayed submission", dep, client, pkg1, d)


async def replay_pop(env: ScenarioEnv) -> None:
    links = {
        "client-tee": [
            Rule("capture", DOWN, Msg.POP_OK, 1, 1, slot="pop"),
            Rule("replay", DOWN, Msg.POP_OK, 2, None, slot="pop"),
        ]
    }
    dep = await env.deploy(links=links)
    src, client = dep.source(), dep.client()
    d0 = dep.random_payload()
    pkg0 = await src.source_submit(d0)
    await _progress(dep, 0)
    early = await client.membership_test(pkg0)  # adversary records this POP
    env.fact("captured_old_pop", early.outcome is Outcome.RETRY_LATER)
    d = dep.random_payload()
    pkg = await src.source_submit(d)
    await _progress(dep, 2)
    await _retry(env, dep, client, pkg, d, "newer item with replayed POP")


# ---------------------------------------------------------------------------
# Malicious TEE host
# ---------------------------------------------------------------------------


async def interrupt_tee(env: ScenarioEnv) -> None:
    dep = await env.deploy()
    src, client = dep.source(), dep.client()
    await _progress(dep, 1)
    halted_at = dep.tee.cnt
    if env.attack:
        dep.tee.pause_export()
    d = dep.random_payload()
    pkg = await src.source_submit(d)
    for i in range(3):
        await dep.push_batches(1, wait=not env.attack)
        await asyncio.sleep(0.05)
        await dep.sync_monitor()
        await env.attempt(f"TEE halted #{i + 1}", dep, client, pkg, d)
    env.fact("counter_halted", dep.tee.cnt == halted_at)


async def impersonate_tee(env: ScenarioEnv) -> None:
    dep = await env.deploy()
    client = dep.client()
    payloads = [dep.random_payload() for _ in range(3)]
    genuine = dep.source(direct=True)
    if env.attack:
        _, addr_a, close_a = await _rogue_tee(dep, steal_report=False)
        _, addr_b, close_b = await _rogue_tee(dep, steal_report=True)
        env.closing(close_a)
        env.closing(close_b)
        src_a = DataSource(dep.ids.sources["source-1"], "source-1", addr_a)
        src_b = DataSource(dep.ids.sources["source-1"], "source-1", addr_b)
        env.closing(src_a.close)
        env.closing(src_b.close)
        pkg_a = await src_a.source_submit(payloads[0])
        pkg_b = await src_b.source_submit(payloads[1])
    else:
        pkg_a = await genuine.source_submit(payloads[0])
        pkg_b = await genuine.source_submit(payloads[1])
    pkg_c = await genuine.source_submit(payloads[2])
    await _progress(dep, 2)
    await env.attempt("report from rogue authority", dep, client, pkg_a, payloads[0], expect="report_signature")
    await env.attempt("genuine report, rogue signing key", dep, client, pkg_b, payloads[1], expect="por_signature")
    if env.attack:
        rogue_pop = RoguePopServer()
        addr = await rogue_pop.start()
        env.closing(rogue_pop.close)
        client = Client(dep.ids.client_registry(), dep.client_monitor_address, addr, timeout=1.0)
        env.closing(client.close)
    await env.attempt("POP from impersonated TEE", dep, client, pkg_c, payloads[2], expect="pop_signature")


# ---------------------------------------------------------------------------
# Malicious database host
# ---------------------------------------------------------------------------


async def impersonate_monitor(env: ScenarioEnv) -> None:
    k = env.rng.randrange(3)
    links = {
        "client-monitor": [
            Rule("replay", DOWN, Msg.CHECKPOINT, 1, 1, slot="forged-known-id"),
            Rule("replay", DOWN, Msg.CHECKPOINT, 2, 2, slot="forged-unknown-id"),
        ]
    }
    dep = await env.deploy(adversary=AdversaryMode.drop_batch(k), links=links)
    src, client = dep.source(), dep.client()
    d = dep.random_payload(8, 32)
    pkg = await _submit_at(dep, src, k, env.rng.randrange(BATCH), d)
    await _progress(dep, 2)
    if env.attack:
        # The server saw every exported batch, so it can compute the true HC_T;
        # it cannot produce the monitor's signature over it.
        true_hc = fold(bytes(32), (it for b in dep.tee.export_log or [] for it in b.items))
        rogue = generate_key()
        ip = dep.interposers["client-monitor"]
        ip.captured["forged-known-id"] = wire.encode_frame(Msg.CHECKPOINT, sign_checkpoint(rogue, "monitor-1", true_hc).encode())
        ip.captured["forged-unknown-id"] = wire.encode_frame(Msg.CHECKPOINT, sign_checkpoint(rogue, "monitor-x", true_hc).encode())
        env.fact("forged_value_is_current", true_hc == dep.tee.hc_t)
    await env.attempt("checkpoint signed by rogue key", dep, client, pkg, d, expect="tee_error:CHECKPOINT_SIG_INVALID")
    await env.attempt("checkpoint from unregistered monitor", dep, client, pkg, d, expect="tee_error:UNKNOWN_MONITOR")


async def _dropped_then_publicize(env: ScenarioEnv, adversary: AdversaryMode, k: int, j: int, label: str) -> None:
    dep = await env.deploy(adversary=adversary)
    src, client = dep.source(), dep.client()
    d = dep.random_payload(8, 32)
    pkg = await _submit_at(dep, src, k, j, d)
    await _progress(dep, 2)
    await _retry(env, dep, client, pkg, d, label)
    if not env.attack:
        return
    env.fact(f"{label}: forged ACK advanced counter", dep.tee.cnt > k + 1)
    # Waiting did not help: publish the item, its POR and the failing checkpoint.
    bundle = EvidenceBundle(pkg, await client.fetch_checkpoint())
    path = env.workdir / f"evidence-{adversary.mode}-{env.seed}.bin"
    bundle.save(path)
    loaded = EvidenceBundle.load(path)
    env.fact(f"{label}: evidence bundle verifies", verify_evidence(loaded, dep.ids.client_registry()))
    env.fact(f"{label}: monitor lacks item", not dep.monitor.holds_item(d))
    env.fact(f"{label}: database lacks item", not dep.db_contains(d))


async def drop_batch_forge_ack(env: ScenarioEnv) -> None:
    k = env.rng.randrange(3)
    await _dropped_then_publicize(env, AdversaryMode.drop_batch(k), k, env.rng.randrange(BATCH), "batch dropped")
    k, j = env.rng.randrange(3), env.rng.randrange(BATCH)
    await _dropped_then_publicize(env, AdversaryMode.drop_item(k, j), k, j, "item dropped")


async def fork_db(env: ScenarioEnv) -> None:
    k = env.rng.randrange(3)
    dep = await env.deploy(adversary=AdversaryMode.fork({"monitor-1": "B"}, [k]))
    src, client = dep.source(), dep.client()
    d = dep.random_payload(8, 32)
    pkg = await _submit_at(dep, src, k, env.rng.randrange(BATCH), d)
    await _progress(dep, 2)
    await _retry(env, dep, client, pkg, d, "monitor shown view B")
    if env.attack:
        env.fact("view A holds item", dep.db.contains(d, "A"))
        env.fact("view B lacks item", not dep.db.contains(d, "B"))
        env.fact("TEE and view A agree", dep.database_fold("A") == dep.tee.hc_t)


async def drop_after_monitor(env: ScenarioEnv) -> None:
    k = env.rng.randrange(3)
    dep = await env.deploy(adversary=AdversaryMode.drop_after_monitor(k))
    src, client = dep.source(), dep.client()
    d = dep.random_payload(8, 32)
    pkg = await _submit_at(dep, src, k, env.rng.randrange(BATCH), d)
    await _progress(dep, 1)
    await env.attempt("item dropped after monitor pulled it", dep, client, pkg, d)
    env.fact("drop triggered", dep.db.triggered)
    env.fact("database no longer returns item", not dep.db_contains(d))
    env.fact("monitor holds item", dep.monitor.holds_item(d))


_CATALOG = (
    Scenario("tamper_messages", "network", Expected.DETECTED,
             "flip one byte of cnt_por, of hc_m in POP_REQ and of cnt_pop in flight", tamper_messages),
    Scenario("drop_messages", "network", Expected.NEVER_ACCEPTS,
             "drop SUBMIT_OK, CHECKPOINT, POP_OK and one DB_STORE", drop_messages),
    Scenario("delay_swap_por", "network", Expected.DETECTED,
             "deliver the earlier POR of d1 as the reply to d2", delay_swap_por),
    Scenario("replay_por_other_item", "network", Expected.DETECTED,
             "malicious source hands over another item's POR", replay_por_other_item),
    Scenario("replay_submission_same_item", "network", Expected.HARMLESS_ACCEPT,
             "replay a captured SUBMIT frame; use the smaller counter", replay_submission_same_item),
    Scenario("replay_pop", "network", Expected.NEVER_ACCEPTS,
             "replace every POP with an old captured one", replay_pop),
    Scenario("interrupt_tee", "tee", Expected.NEVER_ACCEPTS,
             "halt the export task after the target arrives", interrupt_tee),
    Scenario("impersonate_tee", "tee", Expected.DETECTED,
             "rogue authority report, stolen report with rogue key, rogue POP server", impersonate_tee),
    Scenario("impersonate_monitor", "database", Expected.DETECTED,
             "drop the target batch and forge a checkpoint over the true HC_T", impersonate_monitor),
    Scenario("drop_batch_forge_ack", "database", Expected.NEVER_ACCEPTS,
             "drop_batch(k) then drop_item(k, j) with forged ACKs; client publicizes", drop_batch_forge_ack),
    Scenario("fork_db", "database", Expected.NEVER_ACCEPTS,
             "split view: monitor reads view B without batch k", fork_db),
    Scenario("drop_after_monitor", "database", Expected.EVIDENCE_AT_MONITOR,
             "remove batch k once the monitor has pulled it", drop_after_monitor),
)


def scenario_catalog() -> list[Scenario]:
    return list(_CATALOG)


def get_scenario(name: str) -> Scenario:
    for s in _CATALOG:
        if s.name == name:
            return s
    raise KeyError(f"no scenario named {name!r}")


# ---------------------------------------------------------------------------
# Running and judging
# ---------------------------------------------------------------------------

def judge(expected: Expected, attempts: list[Attempt], facts: dict[str, bool], control: bool) -> tuple[bool, str]:
    if not attempts:
        return False, "scenario made no attempts"
    if control:
        bad = [a.describe() for a in attempts if not a.accepted]
        return (not bad), ("all accepted" if not bad else "control not accepted: " + "; ".join(bad))
    failed_facts = [k for k, v in facts.items() if not v]
    if failed_facts:
        return False, "facts failed: " + ", ".join(failed_facts)
    if expected is Expected.DETECTED:
        bad = [a.describe() for a in attempts if not a.detected]
        return (not bad), ("all attempts detected" if not bad else "undetected: " + "; ".join(bad))
    if expected is Expected.NEVER_ACCEPTS:
        bad = [a.describe() for a in attempts if a.accepted]
        return (not bad), ("no attempt accepted" if not bad else "accepted: " + "; ".join(bad))
    if expected is Expected.HARMLESS_ACCEPT:
        ok = any(a.accepted for a in attempts) and all(a.possessed for a in attempts if a.accepted)
        return ok, "accepted and stored" if ok else "no harmless acceptance observed"
    # evidence_at_monitor: acceptance is permitted, the facts carry the claim.
    return True, "monitor holds evidence of the drop"


async def run_scenario(scenario: Scenario, seed: int = 0, control: bool = False, workdir: str | Path | None = None) -> ScenarioResult:
    started = time.perf_counter()
    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="gyokuro-attack-")
        workdir = tmp.name
    env = ScenarioEnv(seed, attack=not control, workdir=Path(workdir))
    result = ScenarioResult(scenario.name, seed, control, "error", scenario.expected.value)
    try:
        await asyncio.wait_for(scenario.script(env), timeout=60)
    except Exception as exc:
        result.message = f"infrastructure error: {exc!r}"
        result.attempts = [traceback.format_exc(limit=4)]
    else:
        ok, msg = judge(scenario.expected, env.attempts, env.facts, control)
        false_accepts = [a for a in env.attempts if a.accepted and not a.possessed]
        result.no_false_accept = not false_accepts
        if false_accepts:
            ok, msg = False, "false accept: " + "; ".join(a.describe() for a in false_accepts)
        result.status = "pass" if ok else "fail"
        result.message = msg
        result.attempts = [a.describe() for a in env.attempts]
        result.facts = dict(env.facts)
    finally:
        await env.close()
        if tmp is not None:
            tmp.cleanup()
    result.seconds = time.perf_counter() - started
    return result


async def run_catalog(seeds: Iterable[int] = range(5), control: bool | None = False, names: Iterable[str] | None = None) -> list[ScenarioResult]:
    """Run scenarios sequentially. ``control=None`` runs attack and control."""
    chosen = [get_scenario(n) for n in names] if names else scenario_catalog()
    modes = [False, True] if control is None else [control]
    out = []
    for s in chosen:
        for seed in seeds:
            for mode in modes:
                out.append(await run_scenario(s, seed, mode))
    return out


def write_junit(results: list[ScenarioResult], path: str | Path) -> None:
    suite = ET.Element(
        "testsuite",
        name="gyokuro-attacks",
        tests=str(len(results)),
        failures=str(sum(r.status == "fail" for r in results)),
        errors=str(sum(r.status == "error" for r in results)),
    )
    for r in results:
        case = ET.SubElement(
            suite,
            "testcase",
            classname=f"attacks.{r.name}",
            name=f"{'control' if r.control else 'attack'}-seed{r.seed}",
            time=f"{r.seconds:.3f}",
        )
        if r.status == "fail":
            ET.SubElement(case, "failure", message=r.message).text = "\n".join(r.attempts)
        elif r.status == "error":
            ET.SubElement(case, "error", message=r.message).text = "\n".join(r.attempts)
        else:
            ET.SubElement(case, "system-out").text = "\n".join(r.attempts)
    ET.ElementTree(suite).write(path, encoding="utf-8", xml_declaration=True)
