"""Data-source and client roles.

The data source signs and submits items and hands the item plus its POR
to clients.  The client re-verifies the handover, then runs the
membership test: fetch a checkpoint, forward it to the TEE for a POP,
verify the POP and apply the strict counter rule ``cnt_por < cnt_pop``.
"""

from __future__ import annotations

import asyncio
import enum
import os
from dataclasses import dataclass, field

from . import wire
from .core import (
    DataItem,
    EncodingError,
    KeyRegistry,
    MonitorCheckpoint,
    PrivateKey,
    ProofOfProcessing,
    ProofOfReception,
    Reader,
    len8,
    pop_preimage,
    sign_item,
    verify,
    verify_checkpoint,
    verify_por,
)
from .wire import Connection, ErrorCode, Msg, ProtocolError

PACKAGE_MAGIC = b"GYK1"
EVIDENCE_MAGIC = b"GYKE"


class Outcome(str, enum.Enum):
    ACCEPTED = "accepted"
    REJECTED_SOURCE = "rejected_source"
    REJECTED_SERVER = "rejected_server"
    RETRY_LATER = "retry_later"


@dataclass(frozen=True)
class MembershipVerdict:
    outcome: Outcome
    detail: str = ""

    @property
    def accepted(self) -> bool:
        return self.outcome is Outcome.ACCEPTED

    def __str__(self) -> str:
        return f"{self.outcome.value}({self.detail})" if self.detail else self.outcome.value


class TransportError(ConnectionError):
    """The peer could not be reached or did not answer in time."""


@dataclass(frozen=True)
class HandoverPackage:
    item: DataItem
    por: ProofOfReception

    def to_bytes(self) -> bytes:
        return PACKAGE_MAGIC + len8(self.item.encode()) + len8(self.por.encode())

    @classmethod
    def from_bytes(cls, data: bytes) -> "HandoverPackage":
        if data[:4] != PACKAGE_MAGIC:
            raise EncodingError("not a handover package (bad magic)")
        r = Reader(data[4:])
        item = DataItem.decode(r.blob())
        por = ProofOfReception.decode(r.blob())
        r.done()
        return cls(item, por)

    def save(self, path: str | os.PathLike[str]) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> "HandoverPackage":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass(frozen=True)
class EvidenceBundle:
    """What a client publishes when an item never becomes testable."""

    package: HandoverPackage
    checkpoint: MonitorCheckpoint

    def to_bytes(self) -> bytes:
        return EVIDENCE_MAGIC + len8(self.package.to_bytes()) + len8(self.checkpoint.encode())

    @classmethod
    def from_bytes(cls, data: bytes) -> "EvidenceBundle":
        if data[:4] != EVIDENCE_MAGIC:
            raise EncodingError("not an evidence bundle (bad magic)")
        r = Reader(data[4:])
        pkg = HandoverPackage.from_bytes(r.blob())
        cp = MonitorCheckpoint.decode(r.blob())
        r.done()
        return cls(pkg, cp)

    def save(self, path: str | os.PathLike[str]) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> "EvidenceBundle":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def verify_evidence(bundle: EvidenceBundle, registry: KeyRegistry) -> bool:
    """A monitor's check that a published bundle is genuine.

    True when the package passes every handover check and the checkpoint
    carries a valid signature of a registered monitor.
    """
    if client_verify_handover(bundle.package, registry) is not None:
        return False
    key = registry.monitor_keys.get(bundle.checkpoint.monitor_key_id)
    return key is not None and verify_checkpoint(bundle.checkpoint, key)


class DataSource:
    def __init__(self, key: PrivateKey, key_id: str, tee_address: tuple[str, int], timeout: float = 10.0) -> None:
        self._key = key
        self.key_id = key_id
        self._conn = Connection(*tee_address, timeout=timeout)

    def make_item(self, payload: bytes) -> DataItem:
        return sign_item(self._key, self.key_id, payload)

    async def submit_item(self, item: DataItem) -> ProofOfReception:
        try:
            msg, body = await self._conn.request(Msg.SUBMIT, item.encode())
        except (OSError, asyncio.TimeoutError, asyncio.IncompleteReadError, EncodingError) as exc:
            raise TransportError(f"submission failed: {exc!r}") from exc
        if msg == Msg.SUBMIT_ERR:
            raise ProtocolError(wire.decode_error(body))
        if msg != Msg.SUBMIT_OK:
            raise TransportError(f"unexpected reply {msg:#x} to SUBMIT")
        return ProofOfReception.decode(body)

    async def source_submit(self, payload: bytes) -> HandoverPackage:
        item = self.make_item(payload)
        return HandoverPackage(item, await self.submit_item(item))

    async def close(self) -> None:
        await self._conn.close()


def client_verify_handover(pkg: HandoverPackage, registry: KeyRegistry) -> MembershipVerdict | None:
    """Handover checks, in order. ``None`` means the package is sound.

    Otherwise a ``rejected_source`` verdict naming the first failed check.
    """
    report = pkg.por.report
    if not verify(registry.apk, report.signed_bytes(), report.authority_sig):
        return MembershipVerdict(Outcome.REJECTED_SOURCE, "report_signature")
    if report.measurement != registry.expected_measurement:
        return MembershipVerdict(Outcome.REJECTED_SOURCE, "measurement")
    # The POR signature is checked over the item the client holds, which
    # covers both "POR verifies" and "its payload matches".
    if not verify_por(pkg.por, pkg.item.payload):
        return MembershipVerdict(Outcome.REJECTED_SOURCE, "por_signature")
    return None


def testing_request_bytes(pkg: HandoverPackage | None, checkpoint: MonitorCheckpoint) -> bytes:
    """Exact bytes sent to the TEE during a membership test.

    ``pkg`` is accepted for interface symmetry and deliberately unused.
    """
    del pkg
    return wire.encode_frame(Msg.POP_REQ, checkpoint.encode())


CHECKPOINT_REQUEST = wire.encode_frame(Msg.CHECKPOINT_REQ)


@dataclass
class Client:
    registry: KeyRegistry
    monitor_address: tuple[str, int]
    tee_address: tuple[str, int]
    timeout: float = 5.0
    _monitor: Connection = field(init=False, repr=False)
    _tee: Connection = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._monitor = Connection(*self.monitor_address, timeout=self.timeout)
        self._tee = Connection(*self.tee_address, timeout=self.timeout)

    async def fetch_checkpoint(self) -> MonitorCheckpoint:
        try:
            msg, body = await self._monitor.request(Msg.CHECKPOINT_REQ)
        except (OSError, asyncio.TimeoutError, asyncio.IncompleteReadError, EncodingError) as exc:
            raise TransportError(f"monitor: {exc!r}") from exc
        if msg != Msg.CHECKPOINT:
            raise TransportError(f"unexpected reply {msg:#x} to CHECKPOINT_REQ")
        return MonitorCheckpoint.decode(body)

    async def request_pop(self, checkpoint: MonitorCheckpoint) -> tuple[int, bytes]:
        try:
            return await self._tee.request(Msg.POP_REQ, checkpoint.encode())
        except (OSError, asyncio.TimeoutError, asyncio.IncompleteReadError, EncodingError) as exc:
            raise TransportError(f"tee: {exc!r}") from exc

    async def membership_test(
        self, pkg: HandoverPackage, checkpoint: MonitorCheckpoint | None = None
    ) -> MembershipVerdict:
        """Run the full test for ``pkg``.

        ``checkpoint`` may be supplied pre-fetched; otherwise one is
        requested from the monitor.  The checkpoint is forwarded to the
        TEE verbatim.
        """
        bad = client_verify_handover(pkg, self.registry)
        if bad is not None:
            return bad
        try:
            if checkpoint is None:
                checkpoint = await self.fetch_checkpoint()
        except (TransportError, EncodingError) as exc:
            return MembershipVerdict(Outcome.RETRY_LATER, f"monitor_unreachable: {exc}")
        try:
            msg, body = await self.request_pop(checkpoint)
        except TransportError as exc:
            return MembershipVerdict(Outcome.RETRY_LATER, f"tee_unreachable: {exc}")
        if msg == Msg.POP_ERR:
            try:
                code = wire.decode_error(body).name
            except (EncodingError, ValueError):
                code = "unknown"
            return MembershipVerdict(Outcome.REJECTED_SERVER, f"tee_error:{code}")
        if msg != Msg.POP_OK:
            return MembershipVerdict(Outcome.REJECTED_SERVER, f"unexpected_reply:{msg:#x}")
        try:
            pop = ProofOfProcessing.decode(body)
        except EncodingError:
            return MembershipVerdict(Outcome.REJECTED_SERVER, "malformed_pop")
        if not verify(pkg.por.report.tee_public_key, pop_preimage(pop.cnt_pop), pop.tee_sig):
            return MembershipVerdict(Outcome.REJECTED_SERVER, "pop_signature")
        if pkg.por.cnt_por < pop.cnt_pop:
            return MembershipVerdict(Outcome.ACCEPTED, f"cnt_por={pkg.por.cnt_por} cnt_pop={pop.cnt_pop}")
        return MembershipVerdict(
            Outcome.RETRY_LATER, f"insufficient_progress cnt_por={pkg.por.cnt_por} cnt_pop={pop.cnt_pop}"
        )

    async def close(self) -> None:
        await self._monitor.close()
        await self._tee.close()

    async def __aenter__(self) -> "Client":
        return self

    async def __aexit__(self, *exc: object) -> None:
        await self.close()


async def client_membership_test(
    pkg: HandoverPackage,
    monitor_address: tuple[str, int],
    tee_address: tuple[str, int],
    registry: KeyRegistry,
    timeout: float = 5.0,
) -> MembershipVerdict:
    async with Client(registry, monitor_address, tee_address, timeout) as client:
        return await client.membership_test(pkg)


__all__ = [
    "CHECKPOINT_REQUEST",
    "Client",
    "DataSource",
    "ErrorCode",
    "EvidenceBundle",
    "HandoverPackage",
    "MembershipVerdict",
    "Outcome",
    "TransportError",
    "client_membership_test",
    "client_verify_handover",
    "testing_request_bytes",
    "verify_evidence",
]
