"""Length-prefixed TCP framing shared by every service.

A frame is ``u32be(length) || type || body`` where ``length`` counts the
type byte plus the body.
"""

from __future__ import annotations

import asyncio
import enum
import struct
from typing import Iterable

from .core import DataItem, EncodingError, Reader, len8, u64

MAX_FRAME = 64 * 1024 * 1024
_HEADER = struct.Struct(">I")


class Msg(enum.IntEnum):
    SUBMIT = 0x10
    SUBMIT_OK = 0x11
    SUBMIT_ERR = 0x1F
    POP_REQ = 0x20
    POP_OK = 0x21
    POP_ERR = 0x2F
    DB_STORE = 0x30
    DB_ACK = 0x31
    READ_RANGE = 0x40
    RANGE = 0x41
    CHECKPOINT_REQ = 0x50
    CHECKPOINT = 0x51
    HOLDS_REQ = 0x52
    HOLDS = 0x53


class ErrorCode(enum.IntEnum):
    SIGNATURE_INVALID = 1
    UNKNOWN_SOURCE = 2
    CHECKPOINT_SIG_INVALID = 3
    UNKNOWN_MONITOR = 4
    MALFORMED = 5


class ProtocolError(Exception):
    """A request rejected by a service, carrying the wire error code."""

    def __init__(self, code: ErrorCode, message: str = "") -> None:
        super().__init__(message or code.name)
        self.code = ErrorCode(code)


def encode_frame(msg_type: int, body: bytes = b"") -> bytes:
    return _HEADER.pack(len(body) + 1) + bytes((msg_type,)) + body


async def read_frame(reader: asyncio.StreamReader) -> tuple[int, bytes]:
    """Read one frame; raises ``asyncio.IncompleteReadError`` at EOF."""
    header = await reader.readexactly(4)
    (length,) = _HEADER.unpack(header)
    if length < 1 or length > MAX_FRAME:
        raise EncodingError(f"bad frame length {length}")
    data = await reader.readexactly(length)
    return data[0], data[1:]


async def write_frame(writer: asyncio.StreamWriter, msg_type: int, body: bytes = b"") -> None:
    writer.write(encode_frame(msg_type, body))
    await writer.drain()


# ---------------------------------------------------------------------------
# Bodies that are not single protocol-core values
# ---------------------------------------------------------------------------


def encode_error(code: ErrorCode) -> bytes:
    return bytes((code,))


def decode_error(body: bytes) -> ErrorCode:
    if len(body) != 1:
        raise EncodingError("error body must be one byte")
    return ErrorCode(body[0])


def encode_items(items: Iterable[DataItem]) -> bytes:
    items = list(items)
    return u64(len(items)) + b"".join(item.encode() for item in items)


def read_items(r: Reader) -> list[DataItem]:
    count = r.u64()
    if count > r.remaining():
        raise EncodingError("item count exceeds body size")
    return [DataItem.read(r) for _ in range(count)]


def encode_store(batch_index: int, items: Iterable[DataItem]) -> bytes:
    return u64(batch_index) + encode_items(items)


def decode_store(body: bytes) -> tuple[int, list[DataItem]]:
    r = Reader(body)
    index = r.u64()
    items = read_items(r)
    r.done()
    return index, items


def decode_ack(body: bytes) -> int:
    r = Reader(body)
    index = r.u64()
    r.done()
    return index


def encode_read_range(requester_id: str, from_position: int, max_items: int) -> bytes:
    return len8(requester_id.encode()) + u64(from_position) + u64(max_items)


def decode_read_range(body: bytes) -> tuple[str, int, int]:
    r = Reader(body)
    requester = r.blob().decode()
    start, limit = r.u64(), r.u64()
    r.done()
    return requester, start, limit


def encode_range(items: Iterable[DataItem], end_position: int) -> bytes:
    return encode_items(items) + u64(end_position)


def decode_range(body: bytes) -> tuple[list[DataItem], int]:
    r = Reader(body)
    items = read_items(r)
    end = r.u64()
    r.done()
    return items, end


class Connection:
    """A request/response client connection; one request in flight at a time."""

    def __init__(self, host: str, port: int, timeout: float | None = 10.0) -> None:
        self.host, self.port, self.timeout = host, port, timeout
        self._reader: asyncio.StreamReader | None = None
        self._writer: asyncio.StreamWriter | None = None
        self._lock = asyncio.Lock()

    async def connect(self) -> None:
        if self._writer is None:
            self._reader, self._writer = await asyncio.open_connection(self.host, self.port)

    async def request(self, msg_type: int, body: bytes = b"") -> tuple[int, bytes]:
        async with self._lock:
            try:
                await self.connect()
                assert self._reader is not None and self._writer is not None
                self._writer.write(encode_frame(msg_type, body))
                await self._writer.drain()
                return await asyncio.wait_for(read_frame(self._reader), self.timeout)
            except BaseException:
                # The stream position is unknown after a failure; start over.
                self._drop()
                raise

    def _drop(self) -> None:
        writer, self._reader, self._writer = self._writer, None, None
        if writer is not None:
            writer.close()

    async def close(self) -> None:
        writer, self._reader, self._writer = self._writer, None, None
        if writer is not None:
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass

    async def __aenter__(self) -> "Connection":
        await self.connect()
        return self

    async def __aexit__(self, *exc: object) -> None:
        await self.close()


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be HOST:PORT, got {addr!r}")
    return host, int(port)
