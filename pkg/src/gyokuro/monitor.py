"""Monitor: mirrors the database, folds HC_M and serves signed checkpoints."""

from __future__ import annotations

import asyncio
import logging
from typing import Protocol

from . import wire
from .core import (
    GENESIS,
    DataItem,
    EncodingError,
    MonitorCheckpoint,
    PrivateKey,
    Reader,
    fold,
    len8,
    sign_checkpoint,
)
from .database import MAX_RANGE, DatabaseHost
from .wire import Connection, Msg

log = logging.getLogger(__name__)


class RangeReader(Protocol):
    async def read_range(self, from_position: int, max_items: int) -> tuple[list[DataItem], int]: ...


class LocalDatabaseReader:
    def __init__(self, db: DatabaseHost, requester_id: str) -> None:
        self.db, self.requester_id = db, requester_id

    async def read_range(self, from_position: int, max_items: int) -> tuple[list[DataItem], int]:
        return self.db.read_range(self.requester_id, from_position, max_items)


class TcpDatabaseReader:
    def __init__(self, host: str, port: int, requester_id: str, timeout: float = 10.0) -> None:
        self.requester_id = requester_id
        self._conn = Connection(host, port, timeout)

    async def read_range(self, from_position: int, max_items: int) -> tuple[list[DataItem], int]:
        msg, body = await self._conn.request(
            Msg.READ_RANGE, wire.encode_read_range(self.requester_id, from_position, max_items)
        )
        if msg != Msg.RANGE:
            raise ConnectionError(f"unexpected reply {msg:#x} to READ_RANGE")
        return wire.decode_range(body)

    async def close(self) -> None:
        await self._conn.close()


class Monitor:
    """Honest-but-curious monitor state.

    ``hc_m`` is always the fold of the mirror from genesis, and
    ``synced_position`` the mirror length.
    """

    def __init__(self, key: PrivateKey, key_id: str, source: RangeReader, pull_period: float = 1.0) -> None:
        self._key = key
        self.key_id = key_id
        self.source = source
        self.pull_period = pull_period
        self.hc_m = GENESIS
        self.mirror: list[DataItem] = []
        self._payloads: set[bytes] = set()
        self._checkpoint: MonitorCheckpoint | None = None

    @property
    def synced_position(self) -> int:
        return len(self.mirror)

    async def pull_and_fold(self, chunk: int = MAX_RANGE) -> tuple[bytes, int]:
        """Fetch everything past ``synced_position`` and fold it in.

        On a transport failure the state is left as it was.
        """
        chunk = min(chunk, MAX_RANGE)
        fetched: list[DataItem] = []
        position = self.synced_position
        while True:
            items, _ = await self.source.read_range(position, chunk)
            fetched.extend(items)
            position += len(items)
            if len(items) < chunk:
                break
        if fetched:
            self.hc_m = fold(self.hc_m, fetched)
            self.mirror.extend(fetched)
            self._payloads.update(it.payload for it in fetched)
        return self.hc_m, self.synced_position

    def issue_checkpoint(self) -> MonitorCheckpoint:
        # Re-signed only when hc_m moves, so repeated requests see identical bytes.
        cp = self._checkpoint
        if cp is None or cp.hc_m != self.hc_m:
            cp = self._checkpoint = sign_checkpoint(self._key, self.key_id, self.hc_m)
        return cp

    def holds_item(self, payload: bytes) -> bool:
        return payload in self._payloads

    async def run(self) -> None:
        while True:
            try:
                await self.pull_and_fold()
            except (ConnectionError, OSError, asyncio.TimeoutError, EncodingError) as exc:
                log.warning("monitor pull failed: %s", exc)
            await asyncio.sleep(self.pull_period)


class MonitorServer:
    def __init__(self, monitor: Monitor, sync: bool = True) -> None:
        self.monitor = monitor
        self.sync = sync
        self._server: asyncio.AbstractServer | None = None
        self._task: asyncio.Task[None] | None = None

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        if self.sync:
            self._task = asyncio.create_task(self.monitor.run())
        self._server = await asyncio.start_server(self._handle, host, port)
        return self._server.sockets[0].getsockname()[:2]

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                msg, body = await wire.read_frame(reader)
                if msg == Msg.CHECKPOINT_REQ:
                    out = wire.encode_frame(Msg.CHECKPOINT, self.monitor.issue_checkpoint().encode())
                elif msg == Msg.HOLDS_REQ:
                    payload = Reader(body).blob() if body else b""
                    out = wire.encode_frame(Msg.HOLDS, bytes((self.monitor.holds_item(payload),)))
                else:
                    break
                writer.write(out)
                await writer.drain()
        except (asyncio.IncompleteReadError, ConnectionError, EncodingError):
            pass
        finally:
            writer.close()

    async def close(self) -> None:
        if self._task is not None:
            self._task.cancel()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()


def encode_holds_request(payload: bytes) -> bytes:
    return len8(payload)
