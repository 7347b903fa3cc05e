"""Show that a membership test sends the same bytes whatever the item.

Two unrelated items are tested against the same checkpoint; the frames
leaving the client on both links are printed and compared.

    python demos/04_privacy_transcript.py
"""

import asyncio

from gyokuro.deploy import Deployment
from gyokuro.interposer import UP


async def main() -> None:
    async with Deployment(batch_size=2, links={"client-tee": [], "client-monitor": []}) as dep:
        src = dep.source()
        p0 = await src.source_submit(b"a")
        p1 = await src.source_submit(b"something much longer " * 50)
        await dep.push_batches(1)
        await dep.sync_monitor()
        seen = {}
        for name, pkg in (("d0", p0), ("d1", p1)):
            marks = {link: len(ip.sent(UP)) for link, ip in dep.interposers.items()}
            verdict = await dep.client().membership_test(pkg)
            seen[name] = {link: b"".join(ip.sent(UP)[marks[link]:]) for link, ip in dep.interposers.items()}
            print(f"{name}: {verdict}")
        for link in dep.interposers:
            a, b = seen["d0"][link], seen["d1"][link]
            print(f"{link:15s} {len(a):4d} bytes  identical={a == b}  {a[:24].hex()}...")


if __name__ == "__main__":
    asyncio.run(main())
