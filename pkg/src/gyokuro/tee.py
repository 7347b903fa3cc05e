"""The simulated-TEE server.

:class:`Tee` holds the enclave state (signing key, counter, buffer,
hash-chain value and bounded history) and implements submission, batch
export and POP issuance.  It is transport-agnostic: batches leave through
a *link* object and ACKs come back through :meth:`Tee.deliver_ack`.
:class:`TeeServer` puts it behind the framed TCP protocol.
"""

from __future__ import annotations

import asyncio
import collections
import logging
import math
from dataclasses import dataclass
from decimal import Decimal
from fractions import Fraction
from typing import Protocol, Sequence

from . import wire
from .core import (
    GENESIS,
    U64_MAX,
    AttestationAuthority,
    AttestationReport,
    DataItem,
    EncodingError,
    HashChainEntry,
    KeyRegistry,
    MonitorCheckpoint,
    PrivateKey,
    ProofOfProcessing,
    ProofOfReception,
    UnknownKeyError,
    fold,
    generate_key,
    pop_preimage,
    por_preimage,
    public_bytes,
    sign,
    verify,
    verify_checkpoint,
)
from .wire import ErrorCode, Msg, ProtocolError

log = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 32
DEFAULT_HISTORY = 1024


def _exact(x: int | float | Fraction | Decimal) -> Fraction:
    # Floats go through their shortest repr so 0.1 means one tenth.
    return Fraction(repr(x)) if isinstance(x, float) else Fraction(x)


def compute_history_capacity(freq_t: int | float | Fraction | Decimal, freq_m: int | float | Fraction | Decimal) -> int:
    """History size N = ceil(freq_t / freq_m) + 1.

    ``freq_t`` is the TEE's batch rate and ``freq_m`` the slowest
    monitor's pull rate, both per second.
    """
    t, m = _exact(freq_t), _exact(freq_m)
    if t <= 0 or m <= 0:
        raise ValueError("frequencies must be positive")
    return math.ceil(t / m) + 1


@dataclass
class TeeConfig:
    batch_size: int = DEFAULT_BATCH_SIZE
    history_capacity: int = DEFAULT_HISTORY
    flush_timeout: float | None = 1.0
    blocking: bool = False
    ack_timeout: float = 2.0
    retry_backoff: float = 0.05
    max_backoff: float = 2.0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.history_capacity < 1:
            raise ValueError("history_capacity must be positive")

    @classmethod
    def from_frequencies(cls, freq_t: float, freq_m: float, **kw: object) -> "TeeConfig":
        return cls(history_capacity=compute_history_capacity(freq_t, freq_m), **kw)  # type: ignore[arg-type]


class HashChainHistory:
    """Bounded map hc -> cnt; evicts the oldest entry when full."""

    def __init__(self, capacity: int = DEFAULT_HISTORY) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._by_hc: dict[bytes, int] = {}
        self._order: collections.deque[HashChainEntry] = collections.deque()

    def append(self, entry: HashChainEntry) -> HashChainEntry | None:
        if entry.hc in self._by_hc:
            raise ValueError("duplicate hash-chain value")
        if self._order and entry.cnt != self._order[-1].cnt + 1:
            raise ValueError("history counters must be contiguous")
        self._order.append(entry)
        self._by_hc[entry.hc] = entry.cnt
        if len(self._order) > self.capacity:
            old = self._order.popleft()
            del self._by_hc[old.hc]
            return old
        return None

    def lookup(self, hc: bytes) -> int | None:
        return self._by_hc.get(hc)

    def entries(self) -> list[HashChainEntry]:
        return list(self._order)

    def latest(self) -> HashChainEntry | None:
        return self._order[-1] if self._order else None

    def __len__(self) -> int:
        return len(self._order)


@dataclass(frozen=True)
class BatchExport:
    batch_index: int
    items: tuple[DataItem, ...]


class DatabaseLink(Protocol):
    async def send_store(self, batch: BatchExport) -> None: ...


class Tee:
    """Enclave state machine.

    Non-blocking by default: a submission is answered at once with the
    index of the batch it joined, and full batches are exported by a
    background task (:meth:`run_exporter`), one in flight at a time.
    """

    def __init__(
        self,
        registry: KeyRegistry,
        authority: AttestationAuthority,
        measurement: bytes,
        config: TeeConfig | None = None,
        keep_export_log: bool = False,
    ) -> None:
        self.config = config or TeeConfig()
        self.registry = registry
        self._key: PrivateKey = generate_key()
        self.report: AttestationReport = authority.issue(measurement, public_bytes(self._key))
        self.cnt = 0
        self.buffer: list[DataItem] = []
        self.hc_t = GENESIS
        self.history = HashChainHistory(self.config.history_capacity)
        self.processed_batches = 0
        self.acks_accepted = 0
        self.acks_discarded = 0
        self.link: DatabaseLink | None = None
        self.export_log: list[BatchExport] | None = [] if keep_export_log else None

        self._fill_index = 0
        self._pending: collections.deque[BatchExport] = collections.deque()
        self._inflight: int | None = None
        self._acked: asyncio.Event | None = None
        self._work = asyncio.Event()
        self._progress = asyncio.Condition()
        self._idle = asyncio.Event()
        self._idle.set()
        self._paused = False
        self._flush_handle: asyncio.TimerHandle | None = None

    @property
    def public_key(self) -> bytes:
        return self.report.tee_public_key

    # -- submissions -------------------------------------------------------

    def handle_submission(self, item: DataItem) -> ProofOfReception:
        """Verify the source signature, buffer the item and return its POR."""
        try:
            key = self.registry.source_key(item.source_key_id)
        except UnknownKeyError:
            raise ProtocolError(ErrorCode.UNKNOWN_SOURCE) from None
        if not verify(key, item.signing_bytes(), item.source_sig):
            raise ProtocolError(ErrorCode.SIGNATURE_INVALID)
        return self.append_verified(item)

    def append_verified(self, item: DataItem) -> ProofOfReception:
        """Buffer an item whose source signature has already been checked."""
        cnt_por = self._fill_index
        self.buffer.append(item)
        if len(self.buffer) >= self.config.batch_size:
            self._seal()
        elif len(self.buffer) == 1:
            self._arm_flush()
        sig = sign(self._key, por_preimage(item.payload, cnt_por, self.report))
        return ProofOfReception(sig, cnt_por, self.report)

    async def submit(self, item: DataItem) -> ProofOfReception:
        if self.config.blocking:
            while self.busy:
                self._idle.clear()
                await self._idle.wait()
        return self.handle_submission(item)

    @property
    def sealed_batches(self) -> int:
        """Batches handed to the exporter so far (index of the filling batch)."""
        return self._fill_index

    @property
    def busy(self) -> bool:
        return self._inflight is not None or bool(self._pending)

    def _arm_flush(self) -> None:
        if self.config.flush_timeout is None:
            return
        try:
            loop = asyncio.get_running_loop()
        except RuntimeError:
            return
        index = self._fill_index
        self._flush_handle = loop.call_later(self.config.flush_timeout, self._flush, index)

    def _flush(self, index: int) -> None:
        if self._fill_index == index and self.buffer:
            log.debug("flushing partial batch %d (%d items)", index, len(self.buffer))
            self._seal()

    def flush(self) -> None:
        """Seal the current partial batch now, if it holds anything."""
        if self.buffer:
            self._seal()

    def _seal(self) -> None:
        if self._flush_handle is not None:
            self._flush_handle.cancel()
            self._flush_handle = None
        if self._fill_index >= U64_MAX:
            raise OverflowError("batch counter exhausted")
        batch = BatchExport(self._fill_index, tuple(self.buffer))
        self.buffer = []
        self._fill_index += 1
        self._pending.append(batch)
        self._idle.clear()
        self._work.set()

    # -- storage & processing ---------------------------------------------

    def deliver_ack(self, batch_index: int) -> None:
        """Feed one DB_ACK. Only the first ACK for the in-flight batch counts."""
        if self._inflight == batch_index and self._acked is not None and not self._acked.is_set():
            self._acked.set()
            self.acks_accepted += 1
        else:
            self.acks_discarded += 1

    async def export_batch(self, batch: BatchExport) -> tuple[bytes, HashChainEntry]:
        if self.link is None:
            raise RuntimeError("no database link configured")
        if batch.batch_index != self.cnt:
            raise ValueError(f"batch {batch.batch_index} exported out of order (cnt={self.cnt})")
        self._inflight = batch.batch_index
        self._acked = asyncio.Event()
        new_hc: bytes | None = None
        backoff = self.config.retry_backoff
        try:
            while True:
                try:
                    await self.link.send_store(batch)
                except (ConnectionError, OSError) as exc:
                    log.warning("database unreachable (%s); retrying in %.2fs", exc, backoff)
                    await asyncio.sleep(backoff)
                    backoff = min(backoff * 2, self.config.max_backoff)
                    continue
                if new_hc is None:
                    new_hc = fold(self.hc_t, batch.items)
                try:
                    await asyncio.wait_for(self._acked.wait(), self.config.ack_timeout)
                    break
                except asyncio.TimeoutError:
                    log.warning("no ACK for batch %d; resending", batch.batch_index)
        finally:
            self._inflight = None
        self.hc_t = new_hc
        entry = HashChainEntry(new_hc, self.cnt)
        self.history.append(entry)
        self.cnt += 1
        self.processed_batches += 1
        if self.export_log is not None:
            self.export_log.append(batch)
        async with self._progress:
            self._progress.notify_all()
        return new_hc, entry

    async def run_exporter(self) -> None:
        """Background export loop; exports pending batches in index order."""
        while True:
            while not self._pending or self._paused:
                if not self._pending and self._inflight is None:
                    self._idle.set()
                self._work.clear()
                await self._work.wait()
            batch = self._pending[0]
            await self.export_batch(batch)
            self._pending.popleft()

    def pause_export(self) -> None:
        """Harness control: stop processing (models an interrupted TEE)."""
        self._paused = True

    def resume_export(self) -> None:
        self._paused = False
        self._work.set()

    async def wait_processed(self, k: int, timeout: float | None = 10.0) -> None:
        async def _wait() -> None:
            async with self._progress:
                await self._progress.wait_for(lambda: self.cnt >= k)

        await asyncio.wait_for(_wait(), timeout)

    def fast_forward(self, batches: Sequence[Sequence[DataItem]]) -> None:
        """Benchmark fixture: advance state as if ``batches`` were exported and ACKed.

        The caller must load the same batches into the database host.
        """
        if self.buffer or self.busy:
            raise RuntimeError("fast_forward needs an idle TEE")
        for items in batches:
            self.hc_t = fold(self.hc_t, items)
            self.history.append(HashChainEntry(self.hc_t, self.cnt))
            self.cnt += 1
            self.processed_batches += 1
            self._fill_index += 1

    # -- membership testing -------------------------------------------------

    def handle_pop_request(self, checkpoint: MonitorCheckpoint) -> ProofOfProcessing:
        try:
            key = self.registry.monitor_key(checkpoint.monitor_key_id)
        except UnknownKeyError:
            raise ProtocolError(ErrorCode.UNKNOWN_MONITOR) from None
        if not verify_checkpoint(checkpoint, key):
            raise ProtocolError(ErrorCode.CHECKPOINT_SIG_INVALID)
        found = self.history.lookup(checkpoint.hc_m)
        cnt_pop = found if found is not None else 0
        return ProofOfProcessing(sign(self._key, pop_preimage(cnt_pop)), cnt_pop)


class LocalDatabaseLink:
    """In-process link: calls the host directly and schedules ACK delivery."""

    def __init__(self, db, tee: Tee) -> None:  # db: DatabaseHost
        self.db = db
        self.tee = tee

    async def send_store(self, batch: BatchExport) -> None:
        loop = asyncio.get_running_loop()
        for ack in self.db.store_batch(batch.batch_index, batch.items):
            loop.call_soon(self.tee.deliver_ack, ack)


class TcpDatabaseLink:
    """Outbound DB_STORE connection; a reader task feeds DB_ACKs to the TEE."""

    def __init__(self, host: str, port: int, tee: Tee) -> None:
        self.host, self.port, self.tee = host, port, tee
        self._writer: asyncio.StreamWriter | None = None
        self._reader_task: asyncio.Task[None] | None = None

    async def _connect(self) -> asyncio.StreamWriter:
        reader, writer = await asyncio.open_connection(self.host, self.port)
        self._writer = writer
        self._reader_task = asyncio.create_task(self._read_acks(reader, writer))
        return writer

    async def _read_acks(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                msg, body = await wire.read_frame(reader)
                if msg == Msg.DB_ACK:
                    self.tee.deliver_ack(wire.decode_ack(body))
                else:
                    log.warning("unexpected message %#x on database link", msg)
        except (asyncio.IncompleteReadError, ConnectionError, EncodingError):
            pass
        finally:
            if self._writer is writer:
                self._writer = None
            writer.close()

    async def send_store(self, batch: BatchExport) -> None:
        writer = self._writer or await self._connect()
        writer.write(wire.encode_frame(Msg.DB_STORE, wire.encode_store(batch.batch_index, batch.items)))
        await writer.drain()

    async def close(self) -> None:
        if self._reader_task is not None:
            self._reader_task.cancel()
        if self._writer is not None:
            self._writer.close()
            self._writer = None


class TeeServer:
    """Serves SUBMIT and POP_REQ over TCP and runs the export loop."""

    def __init__(self, tee: Tee, db_address: tuple[str, int] | None = None) -> None:
        self.tee = tee
        self.db_address = db_address
        self._server: asyncio.AbstractServer | None = None
        self._exporter: asyncio.Task[None] | None = None
        self._link: TcpDatabaseLink | None = None
        self._conns: set[asyncio.StreamWriter] = set()

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        if self.tee.link is None:
            if self.db_address is None:
                raise ValueError("TeeServer needs a database address or a preset link")
            self._link = TcpDatabaseLink(*self.db_address, self.tee)
            self.tee.link = self._link
        self._exporter = asyncio.create_task(self.tee.run_exporter())
        self._server = await asyncio.start_server(self._handle, host, port)
        return self._server.sockets[0].getsockname()[:2]

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self._conns.add(writer)
        try:
            while True:
                msg, body = await wire.read_frame(reader)
                if msg == Msg.SUBMIT:
                    try:
                        por = await self.tee.submit(DataItem.decode(body))
                        out = wire.encode_frame(Msg.SUBMIT_OK, por.encode())
                    except ProtocolError as exc:
                        out = wire.encode_frame(Msg.SUBMIT_ERR, wire.encode_error(exc.code))
                    except (EncodingError, ValueError, UnicodeDecodeError):
                        out = wire.encode_frame(Msg.SUBMIT_ERR, wire.encode_error(ErrorCode.MALFORMED))
                elif msg == Msg.POP_REQ:
                    try:
                        pop = self.tee.handle_pop_request(MonitorCheckpoint.decode(body))
                        out = wire.encode_frame(Msg.POP_OK, pop.encode())
                    except ProtocolError as exc:
                        out = wire.encode_frame(Msg.POP_ERR, wire.encode_error(exc.code))
                    except (EncodingError, ValueError, UnicodeDecodeError):
                        out = wire.encode_frame(Msg.POP_ERR, wire.encode_error(ErrorCode.MALFORMED))
                else:
                    log.warning("tee: unexpected message type %#x", msg)
                    break
                writer.write(out)
                await writer.drain()
        except (asyncio.IncompleteReadError, ConnectionError, EncodingError):
            pass
        finally:
            self._conns.discard(writer)
            writer.close()

    async def close(self) -> None:
        if self._exporter is not None:
            self._exporter.cancel()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for w in list(self._conns):
            w.close()
        if self._link is not None:
            await self._link.close()
