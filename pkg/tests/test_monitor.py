import asyncio

from gyokuro.core import GENESIS, fold, sign_item, verify_checkpoint
from gyokuro.database import AdversaryMode, DatabaseHost, DatabaseServer
from gyokuro.monitor import LocalDatabaseReader, Monitor, MonitorServer, TcpDatabaseReader, encode_holds_request
from gyokuro.wire import Connection, Msg

from conftest import run


def signed(keys, n, start=0):
    return [sign_item(keys.source, "src", f"m{i}".encode()) for i in range(start, start + n)]


def test_incremental_fold_equals_full_fold(keys):
    async def go():
        db = DatabaseHost()
        mon = Monitor(keys.monitor, "mon", LocalDatabaseReader(db, "mon"))
        a, b = signed(keys, 5), signed(keys, 7, 5)
        db.store_batch(0, a)
        hc1, pos1 = await mon.pull_and_fold()
        db.store_batch(1, b)
        hc2, pos2 = await mon.pull_and_fold(chunk=3)
        return a, b, hc1, pos1, hc2, pos2, mon

    a, b, hc1, pos1, hc2, pos2, mon = run(go())
    assert (hc1, pos1) == (fold(GENESIS, a), 5)
    assert (hc2, pos2) == (fold(GENESIS, a + b), 12)
    assert mon.mirror == a + b
    assert mon.holds_item(b"m3") and not mon.holds_item(b"zz")


def test_checkpoint_cached_until_hc_moves(keys):
    async def go():
        db = DatabaseHost()
        mon = Monitor(keys.monitor, "mon", LocalDatabaseReader(db, "mon"))
        c0 = mon.issue_checkpoint()
        c0b = mon.issue_checkpoint()
        db.store_batch(0, signed(keys, 1))
        await mon.pull_and_fold()
        return c0, c0b, mon.issue_checkpoint()

    c0, c0b, c1 = run(go())
    assert c0 is c0b and c0.hc_m == GENESIS
    assert c1.hc_m != GENESIS
    assert verify_checkpoint(c1, keys.monitor.public_key())


def test_monitor_sees_its_forked_view(keys):
    async def go():
        db = DatabaseHost(AdversaryMode.fork({"mon": "B"}, [0]))
        mon = Monitor(keys.monitor, "mon", LocalDatabaseReader(db, "mon"))
        x, y = signed(keys, 2), signed(keys, 2, 2)
        db.store_batch(0, x)
        db.store_batch(1, y)
        await mon.pull_and_fold()
        return mon, y

    mon, y = run(go())
    assert mon.mirror == y


def test_failed_pull_leaves_state(keys):
    class Broken:
        async def read_range(self, position, n):
            raise ConnectionError("gone")

    async def go():
        mon = Monitor(keys.monitor, "mon", Broken())
        try:
            await mon.pull_and_fold()
        except ConnectionError:
            pass
        return mon

    mon = run(go())
    assert mon.hc_m == GENESIS and mon.synced_position == 0


def test_server_over_tcp(keys):
    async def go():
        db = DatabaseHost()
        db_server = DatabaseServer(db)
        db_addr = await db_server.start()
        reader = TcpDatabaseReader(*db_addr, "mon")
        mon = Monitor(keys.monitor, "mon", reader, pull_period=0.01)
        server = MonitorServer(mon, sync=True)
        addr = await server.start()
        items = signed(keys, 3)
        db.store_batch(0, items)
        for _ in range(200):
            if mon.synced_position == 3:
                break
            await asyncio.sleep(0.01)
        async with Connection(*addr) as conn:
            cp_msg, cp_body = await conn.request(Msg.CHECKPOINT_REQ)
            h_msg, h_body = await conn.request(Msg.HOLDS_REQ, encode_holds_request(b"m1"))
            _, miss = await conn.request(Msg.HOLDS_REQ, encode_holds_request(b"no"))
        await server.close()
        await reader.close()
        await db_server.close()
        return items, cp_msg, cp_body, h_msg, h_body, miss

    items, cp_msg, cp_body, h_msg, h_body, miss = run(go())
    from gyokuro.core import MonitorCheckpoint

    assert cp_msg == Msg.CHECKPOINT
    assert MonitorCheckpoint.decode(cp_body).hc_m == fold(GENESIS, items)
    assert h_msg == Msg.HOLDS and h_body == b"\x01" and miss == b"\x00"
