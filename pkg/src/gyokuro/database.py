"""The untrusted database host.

Stores exported batches, answers ACKs and serves positional range reads
to monitors.  An :class:`AdversaryMode` switches in the misbehaviours a
malicious server can attempt against the log.
"""

from __future__ import annotations

import asyncio
import logging
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from . import wire
from .core import DataItem, EncodingError, Reader, u64
from .wire import Msg

log = logging.getLogger(__name__)

MAX_RANGE = 4096
MODES = ("honest", "drop_batch", "drop_item", "forge_ack_flood", "fork", "drop_after_monitor")


@dataclass(frozen=True)
class AdversaryMode:
    mode: str = "honest"
    batch: int | None = None
    position: int | None = None
    view_assignment: dict[str, str] = field(default_factory=dict)
    omit_batches: frozenset[int] = frozenset()
    flood: int = 8

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown adversary mode {self.mode!r}")
        if self.mode in ("drop_batch", "drop_item", "drop_after_monitor") and self.batch is None:
            raise ValueError(f"{self.mode} needs a batch index")
        if self.mode == "drop_item" and self.position is None:
            raise ValueError("drop_item needs a position")
        bad = {v for v in self.view_assignment.values() if v not in ("A", "B")}
        if bad:
            raise ValueError(f"views must be A or B, got {sorted(bad)}")

    @classmethod
    def honest(cls) -> "AdversaryMode":
        return cls()

    @classmethod
    def drop_batch(cls, k: int) -> "AdversaryMode":
        return cls("drop_batch", batch=k)

    @classmethod
    def drop_item(cls, k: int, j: int) -> "AdversaryMode":
        return cls("drop_item", batch=k, position=j)

    @classmethod
    def forge_ack_flood(cls, flood: int = 8) -> "AdversaryMode":
        return cls("forge_ack_flood", flood=flood)

    @classmethod
    def fork(cls, view_assignment: dict[str, str], omit_batches: Iterable[int]) -> "AdversaryMode":
        return cls("fork", view_assignment=dict(view_assignment), omit_batches=frozenset(omit_batches))

    @classmethod
    def drop_after_monitor(cls, k: int) -> "AdversaryMode":
        return cls("drop_after_monitor", batch=k)

    @classmethod
    def parse(cls, text: str) -> "AdversaryMode":
        """Parse the compact form used on the command line.

        ``honest``, ``drop_batch:K``, ``drop_item:K:J``, ``forge_ack_flood[:F]``,
        ``drop_after_monitor:K`` and ``fork:ID=B,ID2=A:K1,K2`` (assignments,
        then batches hidden from view B).
        """
        name, *args = text.strip().split(":")
        if name == "honest" and not args:
            return cls.honest()
        if name in ("drop_batch", "drop_after_monitor") and len(args) == 1:
            return cls(name, batch=int(args[0]))
        if name == "drop_item" and len(args) == 2:
            return cls.drop_item(int(args[0]), int(args[1]))
        if name == "forge_ack_flood" and len(args) <= 1:
            return cls.forge_ack_flood(int(args[0]) if args else 8)
        if name == "fork" and len(args) == 2:
            assign = dict(pair.split("=", 1) for pair in args[0].split(",") if pair)
            omit = [int(k) for k in args[1].split(",") if k]
            return cls.fork(assign, omit)
        raise ValueError(f"cannot parse adversary mode {text!r}")

    @classmethod
    def from_config(cls, cfg: str | dict[str, Any] | None) -> "AdversaryMode":
        if cfg is None:
            return cls.honest()
        if isinstance(cfg, str):
            return cls.parse(cfg)
        mode = cfg.get("mode", "honest")
        if ":" in mode:
            return cls.parse(mode)
        return cls(
            mode,
            batch=cfg.get("batch"),
            position=cfg.get("position"),
            view_assignment=dict(cfg.get("view_assignment", {})),
            omit_batches=frozenset(cfg.get("omit_batches", ())),
            flood=int(cfg.get("flood", 8)),
        )


class ItemLog:
    """Ordered ``(batch_index, position_in_batch, item)`` records.

    With ``path`` set, every appended batch is also written to an
    append-only file which is replayed on construction.
    """

    def __init__(self, path: str | os.PathLike[str] | None = None) -> None:
        self.entries: list[tuple[int, int, DataItem]] = []
        self.committed_batches = 0
        self._path = Path(path) if path is not None else None
        self._file = None
        if self._path is not None:
            if self._path.exists():
                self._replay(self._path.read_bytes())
            self._file = open(self._path, "ab")

    def _replay(self, data: bytes) -> None:
        r = Reader(data)
        while r.remaining():
            try:
                index = r.u64()
                items = wire.read_items(r)
            except EncodingError:
                log.warning("ignoring torn record at the tail of %s", self._path)
                break
            self._append(index, items)

    def _append(self, batch_index: int, items: Sequence[DataItem]) -> None:
        self.entries.extend((batch_index, pos, item) for pos, item in enumerate(items))
        if batch_index == self.committed_batches:
            self.committed_batches += 1

    def append_batch(self, batch_index: int, items: Sequence[DataItem]) -> None:
        self._append(batch_index, items)
        if self._file is not None:
            self._file.write(wire.encode_store(batch_index, items))
            self._file.flush()
            os.fsync(self._file.fileno())

    def remove_batch(self, batch_index: int) -> int:
        before = len(self.entries)
        self.entries = [e for e in self.entries if e[0] != batch_index]
        return before - len(self.entries)

    def end_of_batch(self, batch_index: int) -> int | None:
        """Log position just past the last record of ``batch_index``."""
        last = None
        for i in range(len(self.entries) - 1, -1, -1):
            if self.entries[i][0] == batch_index:
                last = i + 1
                break
            if self.entries[i][0] < batch_index:
                break
        return last

    def __len__(self) -> int:
        return len(self.entries)

    def items(self) -> list[DataItem]:
        return [e[2] for e in self.entries]

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None


class DatabaseHost:
    """Append-only store with switchable adversarial behaviour."""

    def __init__(
        self,
        adversary: AdversaryMode | None = None,
        log_path: str | os.PathLike[str] | None = None,
        seed: int | None = None,
    ) -> None:
        self.adversary = adversary or AdversaryMode.honest()
        self.views: dict[str, ItemLog] = {"A": ItemLog(log_path)}
        if self.adversary.mode == "fork":
            self.views["B"] = ItemLog()
        self.acks_sent = 0
        self.triggered = False
        self._rng = random.Random(seed)
        self._acked_through = self.views["A"].committed_batches

    @property
    def log(self) -> ItemLog:
        return self.views["A"]

    def view_of(self, requester_id: str) -> ItemLog:
        name = self.adversary.view_assignment.get(requester_id, "A")
        return self.views.get(name, self.views["A"])

    def store_batch(self, batch_index: int, items: Sequence[DataItem]) -> list[int]:
        """Store a batch; returns the ACK indices to send back, in order."""
        adv = self.adversary
        acks = [batch_index]
        if batch_index < self._acked_through:
            # Resent batch (TEE timed out waiting): acknowledge, do not re-append.
            self.acks_sent += 1
            return acks
        if batch_index > self._acked_through:
            log.warning("batch %d arrived before %d; ignored", batch_index, self._acked_through)
            return []
        self._acked_through += 1
        if adv.mode == "drop_batch" and batch_index == adv.batch:
            log.info("adversary: dropping batch %d, forging ACK", batch_index)
        elif adv.mode == "drop_item" and batch_index == adv.batch:
            kept = [it for pos, it in enumerate(items) if pos != adv.position]
            self.log.append_batch(batch_index, kept)
        elif adv.mode == "fork":
            self.views["A"].append_batch(batch_index, items)
            if batch_index not in adv.omit_batches:
                self.views["B"].append_batch(batch_index, items)
        else:
            self.log.append_batch(batch_index, items)
        if adv.mode == "forge_ack_flood":
            acks = [batch_index] * adv.flood
        self.acks_sent += len(acks)
        return acks

    def spontaneous_acks(self, count: int) -> list[int]:
        """Forged ACKs unrelated to any store (forge_ack_flood mode)."""
        base = self._acked_through
        acks = [max(0, base + self._rng.randint(-2, 3)) for _ in range(count)]
        self.acks_sent += len(acks)
        return acks

    def read_range(self, requester_id: str, from_position: int, max_items: int = MAX_RANGE) -> tuple[list[DataItem], int]:
        view = self.view_of(requester_id)
        n = len(view)
        if from_position > n or max_items <= 0:
            return [], n
        end = min(n, from_position + min(max_items, MAX_RANGE))
        items = [e[2] for e in view.entries[from_position:end]]
        self._maybe_trigger(view, end)
        return items, end

    def _maybe_trigger(self, view: ItemLog, end: int) -> None:
        adv = self.adversary
        if adv.mode != "drop_after_monitor" or self.triggered:
            return
        boundary = view.end_of_batch(adv.batch)  # type: ignore[arg-type]
        if boundary is not None and end >= boundary:
            removed = view.remove_batch(adv.batch)  # type: ignore[arg-type]
            self.triggered = True
            log.info("adversary: dropped %d items of batch %d after monitor pull", removed, adv.batch)

    def contains(self, payload: bytes, view: str | None = None) -> bool:
        views = [self.views[view]] if view else list(self.views.values())
        return any(e[2].payload == payload for v in views for e in v.entries)

    def bulk_load(self, batches: Iterable[Sequence[DataItem]]) -> None:
        """Benchmark fixture: append pre-built batches without the TEE."""
        for items in batches:
            self.store_batch(self._acked_through, items)

    def close(self) -> None:
        for v in self.views.values():
            v.close()


class DatabaseServer:
    """TCP front end for :class:`DatabaseHost`."""

    def __init__(self, db: DatabaseHost, flood_interval: float = 0.005) -> None:
        self.db = db
        self.flood_interval = flood_interval
        self._server: asyncio.AbstractServer | None = None
        self._tee_writers: set[asyncio.StreamWriter] = set()
        self._flood_task: asyncio.Task[None] | None = None

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._handle, host, port)
        if self.db.adversary.mode == "forge_ack_flood":
            self._flood_task = asyncio.create_task(self._flood())
        return self._server.sockets[0].getsockname()[:2]

    async def _flood(self) -> None:
        while True:
            await asyncio.sleep(self.flood_interval)
            for writer in list(self._tee_writers):
                for index in self.db.spontaneous_acks(4):
                    writer.write(wire.encode_frame(Msg.DB_ACK, u64(index)))

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                msg, body = await wire.read_frame(reader)
                if msg == Msg.DB_STORE:
                    self._tee_writers.add(writer)
                    index, items = wire.decode_store(body)
                    for ack in self.db.store_batch(index, items):
                        writer.write(wire.encode_frame(Msg.DB_ACK, u64(ack)))
                elif msg == Msg.READ_RANGE:
                    requester, start, limit = wire.decode_read_range(body)
                    items, end = self.db.read_range(requester, start, limit)
                    writer.write(wire.encode_frame(Msg.RANGE, wire.encode_range(items, end)))
                else:
                    log.warning("database: unexpected message type %#x", msg)
                    break
                await writer.drain()
        except (asyncio.IncompleteReadError, ConnectionError, EncodingError):
            pass
        finally:
            self._tee_writers.discard(writer)
            writer.close()

    async def close(self) -> None:
        if self._flood_task is not None:
            self._flood_task.cancel()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for w in list(self._tee_writers):
            w.close()
