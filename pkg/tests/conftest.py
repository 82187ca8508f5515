import asyncio

import numpy as np
import pytest

from qkdtunnel.aio import tracked
from qkdtunnel.key_manager import KeyManager
from qkdtunnel.keys import random_keys
from qkdtunnel.kme import KeyManagementEntity
from qkdtunnel.kme_http import LocalKmeClient
from qkdtunnel.tunnel import ClientProxy, EchoServer, LoopThread, ServerProxy, read_record

SAE_A = "198.51.100.2"
SAE_B = "203.0.113.7"

# Bits and bases from the worked BB84 example (0 = "+", 1 = "×").
TABLE_ALICE_BITS = [0, 1, 1, 0, 1, 0, 0, 1]
TABLE_ALICE_BASES = [0, 0, 1, 0, 1, 1, 1, 0]
TABLE_BOB_BASES = [0, 1, 1, 1, 0, 1, 0, 0]
TABLE_BOB_ROW = "↑ ↗ ↘ ↗ → ↗ → →".split()


def make_kme_pair(n_keys=100, key_size_bits=256, seed=0, **kwargs):
    """Two KMEs fed with the same random keys, as the link would do."""
    kme_a = KeyManagementEntity("KME-A", SAE_A, key_size_bits, peer_kme_id="KME-B",
                                tokens={"tok-a": SAE_A}, **kwargs)
    kme_b = KeyManagementEntity("KME-B", SAE_B, key_size_bits, peer_kme_id="KME-A",
                                tokens={"tok-b": SAE_B}, **kwargs)
    keys = random_keys(n_keys, key_size_bits // 8, np.random.default_rng(seed))
    kme_a.store_key_pair(keys, SAE_B)
    kme_b.store_key_pair(keys, SAE_A)
    return kme_a, kme_b, keys


@pytest.fixture
def kme_pair():
    return make_kme_pair()


@pytest.fixture
def loop_thread():
    lt = LoopThread()
    yield lt
    lt.close()


class Mitm:
    """Record-aware relay between client and server proxy.

    ``mutate(direction, index, raw)`` may return replacement bytes for a
    record; ``extra(direction, index, raw)`` may return bytes to inject after it.
    All forwarded bytes are captured in ``wire``.
    """

    def __init__(self, target, mutate=None, extra=None):
        self.target = target
        self.mutate = mutate
        self.extra = extra
        self.wire = bytearray()
        self._server = None
        self._tasks = set()

    @property
    def address(self):
        return self._server.sockets[0].getsockname()[:2]

    async def start(self):
        self._server = await asyncio.start_server(tracked(self._handle, self._tasks), "127.0.0.1", 0)
        return self

    async def stop(self):
        self._server.close()
        await self._server.wait_closed()

    async def _pipe(self, direction, reader, writer):
        index = 0
        try:
            while True:
                rec = await read_record(reader)
                raw = rec.encode()
                if self.mutate:
                    raw = self.mutate(direction, index, raw) or raw
                self.wire += raw
                writer.write(raw)
                if self.extra:
                    more = self.extra(direction, index, raw)
                    if more:
                        self.wire += more
                        writer.write(more)
                await writer.drain()
                index += 1
        except Exception:
            pass
        finally:
            writer.close()

    async def _handle(self, c_reader, c_writer):
        s_reader, s_writer = await asyncio.open_connection(*self.target)
        await asyncio.gather(
            self._pipe("c2s", c_reader, s_writer),
            self._pipe("s2c", s_reader, c_writer),
        )


class TunnelRig:
    """Echo upstream, server proxy, optional MITM and client proxy on one loop."""

    def __init__(self, loop_thread, n_keys=200, high_water=32, low_water=4, mitm=None,
                 observer=None):
        self.lt = loop_thread
        self.kme_a, self.kme_b, self.keys = make_kme_pair(n_keys)
        self.km_a = KeyManager(LocalKmeClient(self.kme_a, SAE_A), SAE_A,
                               low_water=low_water, high_water=high_water)
        self.km_a.add_peer(SAE_B)
        self.km_b = KeyManager(LocalKmeClient(self.kme_b, SAE_B), SAE_B)
        self.mitm = mitm
        self.observer = observer
        self.lt.run(self._start())

    async def _start(self):
        self.echo_server = await EchoServer().start()
        self.server = await ServerProxy(self.km_b, ("127.0.0.1", 0), self.echo_server.address,
                                        observer=self.observer).start()
        target = self.server.address
        if self.mitm is not None:
            self.mitm.target = target
            await self.mitm.start()
            target = self.mitm.address
        self.client = await ClientProxy(self.km_a, ("127.0.0.1", 0), target,
                                        observer=self.observer).start()

    async def echo_once(self, payload: bytes):
        reader, writer = await asyncio.open_connection(*self.client.address)
        try:
            async def send():
                for i in range(0, len(payload), 65536):
                    writer.write(payload[i : i + 65536])
                    await writer.drain()
                writer.write_eof()

            sender = asyncio.ensure_future(send())
            try:
                got = await asyncio.wait_for(reader.read(-1), 30)
            except ConnectionResetError:
                got = None
            try:
                await sender
            except OSError:
                pass
            return got
        finally:
            writer.close()

    def echo(self, payload: bytes):
        return self.lt.run(self.echo_once(payload), timeout=60)

    def stop(self):
        async def _stop():
            await self.client.stop()
            if self.mitm is not None:
                await self.mitm.stop()
            await self.server.stop()
            await self.echo_server.stop()

        self.lt.run(_stop(), timeout=30)
        self.km_a.stop()



# -- acceptance verdicts -----------------------------------------------------------------

ACCEPTANCE_RESULTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    number, title = marker.args
    if rep.when == "call" or rep.failed:
        ACCEPTANCE_RESULTS[number] = (title, "PASS" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, verdict = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"{verdict} criterion {number:2d}: {title}")
