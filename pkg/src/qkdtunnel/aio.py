"""Asyncio helpers shared by the TCP front ends."""

from __future__ import annotations

import asyncio


def tracked(handler, tasks: set):
    """Wrap a ``start_server`` callback so its task is strongly referenced.

    The loop only keeps weak references to connection tasks, so a handler
    parked on an executor future can otherwise be garbage collected mid-flight.
    """

    async def run(reader, writer):
        task = asyncio.current_task()
        tasks.add(task)
        try:
            await handler(reader, writer)
        finally:
            tasks.discard(task)

    return run


async def cancel_all(tasks: set):
    for t in list(tasks):
        t.cancel()
    if tasks:
        await asyncio.gather(*list(tasks), return_exceptions=True)
