"""The host deletes a batch after the monitor has already mirrored it.

Clients still get accepted (the chain values agree), and the monitor
keeps the dropped item, so it can be produced as evidence later.

    python demos/03_drop_after_monitor.py
"""

import asyncio

from gyokuro.database import AdversaryMode
from gyokuro.deploy import Deployment


async def main() -> None:
    async with Deployment(batch_size=2, adversary=AdversaryMode.drop_after_monitor(0)) as dep:
        pkg = await dep.source().source_submit(b"soon to vanish")
        await dep.push_batches(1)
        await dep.sync_monitor()
        print("host dropped the batch:", dep.db.triggered)
        print("host still stores item:", dep.db_contains(pkg.item.payload))
        print("monitor mirror has it: ", dep.monitor.holds_item(pkg.item.payload))
        print("client verdict:        ", await dep.client().membership_test(pkg))


if __name__ == "__main__":
    asyncio.run(main())
