"""A database host that shows the monitor a copy without one batch.

The TEE's chain commits to the real history, so the monitor's checkpoint
never matches any entry the TEE holds for that history and the hidden
item is never accepted.  Without the attack the same steps succeed.

    python demos/02_split_view.py
"""

import asyncio

from gyokuro.database import AdversaryMode
from gyokuro.deploy import Deployment


async def run(forked: bool) -> None:
    adversary = AdversaryMode.fork({"monitor-1": "B"}, omit_batches=[1]) if forked else None
    async with Deployment(batch_size=2, adversary=adversary) as dep:
        await dep.push_batches(1)
        pkg = await dep.source().source_submit(b"the hidden item")
        await dep.push_batches(2)
        await dep.sync_monitor()
        verdict = await dep.client().membership_test(pkg)
        print(f"{'forked ' if forked else 'honest '} host: TEE cnt={dep.tee.cnt}, "
              f"monitor holds item: {dep.monitor.holds_item(pkg.item.payload)}, verdict: {verdict}")


async def main() -> None:
    await run(forked=False)
    await run(forked=True)


if __name__ == "__main__":
    asyncio.run(main())
