import asyncio

import pytest

from gyokuro import wire
from gyokuro.core import GENESIS, fold, sign_item
from gyokuro.database import MAX_RANGE, AdversaryMode, DatabaseHost, DatabaseServer, ItemLog
from gyokuro.wire import Connection, Msg

from conftest import run


@pytest.fixture
def batches(keys):
    return [[sign_item(keys.source, "src", f"b{k}i{j}".encode()) for j in range(3)] for k in range(4)]


def load(db, batches):
    return [db.store_batch(k, b) for k, b in enumerate(batches)]


class TestAdversaryMode:
    @pytest.mark.parametrize(
        "text, expected",
        [
            ("honest", AdversaryMode()),
            ("drop_batch:3", AdversaryMode("drop_batch", batch=3)),
            ("drop_item:2:1", AdversaryMode("drop_item", batch=2, position=1)),
            ("forge_ack_flood", AdversaryMode("forge_ack_flood")),
            ("forge_ack_flood:4", AdversaryMode("forge_ack_flood", flood=4)),
            ("drop_after_monitor:1", AdversaryMode("drop_after_monitor", batch=1)),
            ("fork:m1=B,m2=A:2,3", AdversaryMode.fork({"m1": "B", "m2": "A"}, [2, 3])),
        ],
    )
    def test_parse(self, text, expected):
        assert AdversaryMode.parse(text) == expected
        assert AdversaryMode.from_config(text) == expected

    @pytest.mark.parametrize("text", ["", "drop_batch", "drop_item:1", "bogus:1", "honest:1", "fork:a=C:1"])
    def test_parse_errors(self, text):
        with pytest.raises(ValueError):
            AdversaryMode.parse(text)

    def test_from_config_dict(self):
        m = AdversaryMode.from_config({"mode": "fork", "view_assignment": {"m": "B"}, "omit_batches": [1]})
        assert m == AdversaryMode.fork({"m": "B"}, [1])
        assert AdversaryMode.from_config(None) == AdversaryMode.honest()

    def test_missing_batch(self):
        with pytest.raises(ValueError):
            AdversaryMode("drop_batch")


class TestHonestHost:
    def test_store_and_ack(self, batches):
        db = DatabaseHost()
        assert load(db, batches) == [[0], [1], [2], [3]]
        assert db.log.items() == [it for b in batches for it in b]
        assert db.acks_sent == 4

    def test_resend_is_acked_not_reappended(self, batches):
        db = DatabaseHost()
        load(db, batches[:2])
        assert db.store_batch(1, batches[1]) == [1]
        assert len(db.log) == 6

    def test_early_batch_ignored(self, batches):
        db = DatabaseHost()
        assert db.store_batch(2, batches[2]) == []
        assert len(db.log) == 0

    def test_read_range_positions(self, batches):
        db = DatabaseHost()
        load(db, batches)
        flat = db.log.items()
        assert db.read_range("m", 0, 5) == (flat[:5], 5)
        assert db.read_range("m", 5, 100) == (flat[5:], 12)
        assert db.read_range("m", 12, 10) == ([], 12)
        assert db.read_range("m", 99, 10) == ([], 12)
        assert db.read_range("m", 0, 0) == ([], 12)

    def test_contains(self, batches):
        db = DatabaseHost()
        load(db, batches)
        assert db.contains(b"b2i1") and not db.contains(b"nope")

    def test_persistent_log_replays(self, tmp_path, batches):
        path = tmp_path / "items.log"
        db = DatabaseHost(log_path=path)
        load(db, batches[:2])
        db.close()
        again = DatabaseHost(log_path=path)
        assert again.log.items() == batches[0] + batches[1]
        assert again.store_batch(2, batches[2]) == [2]
        again.close()

    def test_torn_tail_ignored(self, tmp_path, batches):
        path = tmp_path / "items.log"
        log = ItemLog(path)
        log.append_batch(0, batches[0])
        log.close()
        with open(path, "ab") as fh:
            fh.write(b"\x00\x00\x00")
        assert ItemLog(path).items() == batches[0]


class TestAdversarialHost:
    def test_drop_batch_acks_anyway(self, batches):
        db = DatabaseHost(AdversaryMode.drop_batch(1))
        assert load(db, batches) == [[0], [1], [2], [3]]
        assert db.log.items() == batches[0] + batches[2] + batches[3]

    def test_drop_item(self, batches):
        db = DatabaseHost(AdversaryMode.drop_item(2, 1))
        load(db, batches)
        assert db.log.items() == batches[0] + batches[1] + [batches[2][0], batches[2][2]] + batches[3]

    def test_flood_multiplies_acks(self, batches):
        db = DatabaseHost(AdversaryMode.forge_ack_flood(5))
        assert db.store_batch(0, batches[0]) == [0] * 5
        assert len(db.spontaneous_acks(10)) == 10

    def test_fork_views(self, batches):
        db = DatabaseHost(AdversaryMode.fork({"victim": "B"}, [1]))
        load(db, batches)
        assert db.read_range("victim", 0)[0] == batches[0] + batches[2] + batches[3]
        assert db.read_range("other", 0)[0] == [it for b in batches for it in b]

    def test_drop_after_monitor(self, batches):
        db = DatabaseHost(AdversaryMode.drop_after_monitor(1))
        load(db, batches[:2])
        items, end = db.read_range("m", 0, MAX_RANGE)
        assert items == batches[0] + batches[1] and end == 6
        assert db.triggered
        assert not db.contains(batches[1][0].payload)
        assert len(db.log) == 3

    def test_drop_after_monitor_waits_for_the_batch(self, batches):
        db = DatabaseHost(AdversaryMode.drop_after_monitor(1))
        load(db, batches[:2])
        db.read_range("m", 0, 4)  # stops inside batch 1
        assert not db.triggered


class TestServer:
    def test_store_ack_and_range_over_tcp(self, batches):
        async def go():
            db = DatabaseHost()
            server = DatabaseServer(db)
            addr = await server.start()
            async with Connection(*addr) as conn:
                msg, body = await conn.request(Msg.DB_STORE, wire.encode_store(0, batches[0]))
                assert msg == Msg.DB_ACK and wire.decode_ack(body) == 0
                msg, body = await conn.request(Msg.READ_RANGE, wire.encode_read_range("m", 1, 10))
                assert msg == Msg.RANGE
                got = wire.decode_range(body)
            await server.close()
            return got

        items, end = run(go())
        assert items == batches[0][1:] and end == 3

    def test_flood_task_sends_spontaneous_acks(self, batches):
        async def go():
            db = DatabaseHost(AdversaryMode.forge_ack_flood(1))
            server = DatabaseServer(db, flood_interval=0.001)
            addr = await server.start()
            reader, writer = await asyncio.open_connection(*addr)
            writer.write(wire.encode_frame(Msg.DB_STORE, wire.encode_store(0, batches[0])))
            acks = []
            for _ in range(20):
                msg, body = await wire.read_frame(reader)
                acks.append(wire.decode_ack(body))
            writer.close()
            await server.close()
            return acks

        assert len(run(go())) == 20

    def test_fold_of_log_matches(self, batches):
        db = DatabaseHost()
        load(db, batches)
        assert fold(GENESIS, db.log.items()) == fold(GENESIS, [it for b in batches for it in b])
