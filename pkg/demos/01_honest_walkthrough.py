"""Walk one item from submission to an accepted membership test.

Everything runs on loopback in this process: database host, TEE, monitor,
one data source and one client.

    python demos/01_honest_walkthrough.py
"""

import asyncio

from gyokuro.clients import client_verify_handover
from gyokuro.deploy import Deployment


async def main() -> None:
    async with Deployment(batch_size=4) as dep:
        src = dep.source()
        pkg = await src.source_submit(b"certificate for example.org")
        print(f"submitted; the POR says the item joined batch {pkg.por.cnt_por}")

        # The client received the package out of band and checks it first.
        problem = client_verify_handover(pkg, dep.ids.client_registry())
        print("handover check:", "ok" if problem is None else problem)

        client = dep.client()
        print("test right away:        ", await client.membership_test(pkg))

        # The batch holding the item is exported, then one more batch follows it.
        await dep.push_batches(1)
        print("test before monitor sync:", await client.membership_test(pkg))

        hc, position = await dep.sync_monitor()
        print(f"monitor synced to position {position}, HC_M {hc.hex()[:16]}...")
        print("test after monitor sync: ", await client.membership_test(pkg))


if __name__ == "__main__":
    asyncio.run(main())
