"""Frame-aware TCP proxy that rewrites traffic on one link.

Rules are evaluated in order for every frame.  ``capture`` stores the
frame and lets evaluation continue; every other action is terminal.
Captured frames are replayed byte for byte.
"""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field
from typing import Callable

from . import wire
from .core import EncodingError

log = logging.getLogger(__name__)

ACTIONS = ("tamper", "drop", "delay", "duplicate", "swap", "capture", "replay")
UP, DOWN = "up", "down"  # towards the server / back to the caller


@dataclass
class Rule:
    action: str
    direction: str = DOWN
    msg_type: int | None = None
    first: int = 1
    last: int | None = None
    offset: int | Callable[[bytes], int] = 0
    length: int = 1
    xor: int = 0x01
    delay: float = 0.0
    copies: int = 2
    slot: str = "default"
    seen: int = field(default=0, init=False)

    def __post_init__(self) -> None:
        if self.action not in ACTIONS:
            raise ValueError(f"unknown interposer action {self.action!r}")
        if self.direction not in (UP, DOWN):
            raise ValueError("direction must be 'up' or 'down'")

    def matches(self, direction: str, msg_type: int) -> bool:
        return self.direction == direction and self.msg_type in (None, msg_type)

    def in_window(self) -> bool:
        return self.seen >= self.first and (self.last is None or self.seen <= self.last)


def tamper_body(frame: bytes, offset: int, length: int, xor: int) -> bytes:
    body_start = 5
    buf = bytearray(frame)
    for i in range(body_start + offset, min(len(buf), body_start + offset + length)):
        buf[i] ^= xor
    return bytes(buf)


class Interposer:
    def __init__(self, upstream: tuple[str, int], rules: list[Rule] | None = None, name: str = "") -> None:
        self.upstream = upstream
        self.rules = list(rules or [])
        self.name = name
        self.captured: dict[str, bytes] = {}
        self.events: list[tuple[str, int, str]] = []
        self.transcript: list[tuple[str, bytes]] = []
        self._server: asyncio.AbstractServer | None = None
        self._tasks: set[asyncio.Task[None]] = set()
        self._writers: set[asyncio.StreamWriter] = set()

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._accept, host, port)
        return self._server.sockets[0].getsockname()[:2]

    async def _accept(self, c_reader: asyncio.StreamReader, c_writer: asyncio.StreamWriter) -> None:
        try:
            s_reader, s_writer = await asyncio.open_connection(*self.upstream)
        except OSError:
            c_writer.close()
            return
        self._writers.update((c_writer, s_writer))
        up = asyncio.create_task(self._pump(c_reader, s_writer, UP))
        down = asyncio.create_task(self._pump(s_reader, c_writer, DOWN))
        self._tasks.update((up, down))
        try:
            await asyncio.wait({up, down}, return_when=asyncio.FIRST_COMPLETED)
        finally:
            for t in (up, down):
                t.cancel()
                self._tasks.discard(t)
            for w in (c_writer, s_writer):
                w.close()
                self._writers.discard(w)

    async def _pump(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, direction: str) -> None:
        held: list[bytes] = []
        flush: asyncio.TimerHandle | None = None

        def release() -> None:
            while held:
                writer.write(held.pop(0))

        try:
            while True:
                msg, body = await wire.read_frame(reader)
                frame = wire.encode_frame(msg, body)
                self.transcript.append((direction, frame))
                out = await self._apply(direction, msg, frame)
                if out is None:  # swap: hold until the next frame
                    held.append(frame)
                    loop = asyncio.get_running_loop()
                    flush = loop.call_later(1.0, release)
                    continue
                for f in out:
                    writer.write(f)
                if held:
                    if flush is not None:
                        flush.cancel()
                    release()
                await writer.drain()
        except (asyncio.IncompleteReadError, ConnectionError, EncodingError):
            pass

    async def _apply(self, direction: str, msg: int, frame: bytes) -> list[bytes] | None:
        chosen: Rule | None = None
        for rule in self.rules:
            if not rule.matches(direction, msg):
                continue
            rule.seen += 1
            if chosen is not None or not rule.in_window():
                continue
            if rule.action == "capture":
                self.captured[rule.slot] = frame
                self.events.append((direction, msg, "capture"))
                continue
            chosen = rule
        if chosen is None:
            return [frame]
        self.events.append((direction, msg, chosen.action))
        action = chosen.action
        if action == "drop":
            return []
        if action == "tamper":
            body = frame[5:]
            off = chosen.offset(body) if callable(chosen.offset) else chosen.offset
            return [tamper_body(frame, off, chosen.length, chosen.xor)]
        if action == "delay":
            await asyncio.sleep(chosen.delay)
            return [frame]
        if action == "duplicate":
            return [frame] * chosen.copies
        if action == "replay":
            return [self.captured.get(chosen.slot, frame)]
        return None  # swap

    async def replay(self, slot: str, upstream: tuple[str, int] | None = None, timeout: float = 5.0) -> tuple[int, bytes]:
        """Send a captured frame verbatim on a fresh connection; return the reply."""
        frame = self.captured[slot]
        reader, writer = await asyncio.open_connection(*(upstream or self.upstream))
        try:
            writer.write(frame)
            await writer.drain()
            return await asyncio.wait_for(wire.read_frame(reader), timeout)
        finally:
            writer.close()

    def sent(self, direction: str = UP) -> list[bytes]:
        return [f for d, f in self.transcript if d == direction]

    async def close(self) -> None:
        for t in list(self._tasks):
            t.cancel()
        for w in list(self._writers):
            w.close()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
