"""Tunnel client/server proxies carrying TCP byte streams over QSTP.

One QSTP session (and therefore one fresh QKD key) per accepted connection.
Each direction ends with an empty Data record, which doubles as an
authenticated end-of-stream marker: it is how half-close propagates, and a
tunnel that drops without it is treated as truncated.
"""

from __future__ import annotations

import asyncio
import logging
import os
import socket
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

from .aio import cancel_all, tracked
from .errors import (
    BadIdentity,
    FramingError,
    KmeError,
    KmeTransportError,
    NoKeysAvailable,
    ProtocolError,
)
from .key_manager import KeyManager, PskIdentity
from .qstp import (
    HEADER,
    MAX_PLAINTEXT,
    Alert,
    Direction,
    HandshakeTranscript,
    RecordType,
    TunnelRecord,
    alert_record,
    check_header,
    client_key_exchange,
    derive_session_keys,
    finished_mac,
    open_record,
    parse_client_key_exchange,
    parse_server_hello,
    seal_record,
    server_hello,
    verify_finished,
)

log = logging.getLogger(__name__)

HANDSHAKE_TIMEOUT = 10.0


class PeerAlert(Exception):
    def __init__(self, code: int):
        super().__init__(f"peer sent alert {Alert(code).name if code in Alert._value2member_map_ else code}")
        self.code = code


async def read_record(reader: asyncio.StreamReader) -> TunnelRecord:
    try:
        header = await reader.readexactly(HEADER.size)
    except asyncio.IncompleteReadError as exc:
        raise FramingError(f"stream ended inside/before a record header ({len(exc.partial)} bytes)")
    rtype, length = check_header(header)
    try:
        payload = await reader.readexactly(length)
    except asyncio.IncompleteReadError as exc:
        raise FramingError(f"record declares {length} bytes, stream ended after {len(exc.partial)}")
    return TunnelRecord(rtype, payload)


async def expect(reader: asyncio.StreamReader, rtype: RecordType) -> TunnelRecord:
    rec = await read_record(reader)
    if rec.type == RecordType.ALERT:
        raise PeerAlert(rec.payload[0] if rec.payload else 0)
    if rec.type != rtype:
        raise ProtocolError(f"expected {rtype.name}, got type {rec.type}", Alert.PROTOCOL_ERROR)
    return rec


_LINGER_RESET = struct.pack("ii", 1, 0)


def _abort(writer: Optional[asyncio.StreamWriter]):
    """Drop a connection with a TCP reset so the far end never sees a clean EOF."""
    if writer is None or writer.transport.is_closing():
        return
    sock = writer.get_extra_info("socket")
    if sock is not None:
        try:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, _LINGER_RESET)
        except OSError:
            pass
    writer.transport.abort()


async def _send_alert(writer: asyncio.StreamWriter, code: int):
    try:
        writer.write(alert_record(code).encode())
        await asyncio.wait_for(writer.drain(), 1.0)
    except (OSError, asyncio.TimeoutError, RuntimeError):
        pass


@dataclass
class ProxyStats:
    handshakes_ok: int = 0
    handshakes_failed: int = 0
    bytes_in: int = 0
    bytes_out: int = 0
    sessions_done: int = 0
    sessions_aborted: int = 0
    key_ids: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    def fail(self, reason: str):
        self.handshakes_failed += 1
        self.failures[reason] = self.failures.get(reason, 0) + 1

    def snapshot(self) -> dict:
        return {
            "handshakes_ok": self.handshakes_ok,
            "handshakes_failed": self.handshakes_failed,
            "bytes_in": self.bytes_in,
            "bytes_out": self.bytes_out,
            "sessions_done": self.sessions_done,
            "sessions_aborted": self.sessions_aborted,
            "failures": dict(self.failures),
        }


SessionObserver = Callable[[PskIdentity, bytes, object], None]


class _Proxy:
    role: Direction

    def __init__(self, key_manager: KeyManager, listen: tuple[str, int], *,
                 observer: Optional[SessionObserver] = None, rng=os.urandom,
                 max_workers: int = 32):
        self.km = key_manager
        self.listen = listen
        self.observer = observer
        self.rng = rng
        self.stats = ProxyStats()
        self._server: Optional[asyncio.base_events.Server] = None
        self._executor = ThreadPoolExecutor(max_workers=max_workers,
                                            thread_name_prefix=f"{self.role.value}-proxy")
        self._tasks: set[asyncio.Task] = set()

    @property
    def address(self) -> tuple[str, int]:
        return self._server.sockets[0].getsockname()[:2]

    async def start(self):
        self._server = await asyncio.start_server(self._on_connect, *self.listen)
        return self

    async def stop(self):
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for t in list(self._tasks):
            t.cancel()
        if self._tasks:
            await asyncio.gather(*self._tasks, return_exceptions=True)
        self._executor.shutdown(wait=False)

    async def _on_connect(self, reader, writer):
        task = asyncio.current_task()
        self._tasks.add(task)
        try:
            await self._handle(reader, writer)
        except asyncio.CancelledError:
            _abort(writer)
            raise
        except Exception:  # pragma: no cover - defensive
            log.exception("%s proxy session crashed", self.role.value)
            _abort(writer)
        finally:
            self._tasks.discard(task)

    async def _blocking(self, fn, *args):
        return await asyncio.get_running_loop().run_in_executor(self._executor, fn, *args)

    async def _relay(self, plain_r, plain_w, tun_r, tun_w, keys):
        me = self.role

        async def outbound():
            while True:
                data = await plain_r.read(MAX_PLAINTEXT)
                if not data:
                    break
                tun_w.write(seal_record(keys, me, data).encode())
                self.stats.bytes_out += len(data)
                await tun_w.drain()
            tun_w.write(seal_record(keys, me, b"").encode())
            await tun_w.drain()

        async def inbound():
            while True:
                rec = await read_record(tun_r)
                if rec.type == RecordType.ALERT:
                    raise PeerAlert(rec.payload[0] if rec.payload else 0)
                data = open_record(keys, me.peer, rec)
                if not data:
                    if plain_w.can_write_eof():
                        plain_w.write_eof()
                    return
                self.stats.bytes_in += len(data)
                plain_w.write(data)
                await plain_w.drain()

        tasks = [asyncio.ensure_future(outbound()), asyncio.ensure_future(inbound())]
        try:
            for fut in asyncio.as_completed(tasks):
                await fut
        except (ProtocolError, FramingError, PeerAlert, OSError, asyncio.IncompleteReadError) as exc:
            for t in tasks:
                t.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)
            log.warning("%s proxy: session torn down: %s", me.value, exc)
            if isinstance(exc, ProtocolError):
                await _send_alert(tun_w, exc.alert)
            self.stats.sessions_aborted += 1
            _abort(plain_w)
            _abort(tun_w)
            return
        except asyncio.CancelledError:
            for t in tasks:
                t.cancel()
            raise
        self.stats.sessions_done += 1
        for w in (plain_w, tun_w):
            w.close()
        for w in (plain_w, tun_w):
            try:
                await w.wait_closed()
            except OSError:
                pass


class ClientProxy(_Proxy):
    """Accepts local application connections and tunnels them to a ServerProxy."""

    role = Direction.CLIENT

    def __init__(self, key_manager: KeyManager, listen, server_addr: tuple[str, int],
                 client_addr: Optional[str] = None, **kwargs):
        super().__init__(key_manager, listen, **kwargs)
        self.server_addr = server_addr
        self.client_addr = client_addr or key_manager.sae_id

    async def handshake(self, tun_r, tun_w):
        hello = await expect(tun_r, RecordType.SERVER_HELLO)
        hint, server_nonce = parse_server_hello(hello.payload)
        try:
            identity, psk = await self._blocking(self.km.select_psk, hint, self.client_addr)
        except NoKeysAvailable:
            await _send_alert(tun_w, Alert.NO_KEYS)
            raise
        self.stats.key_ids.append(identity.keyId)
        kex = client_key_exchange(identity, self.rng)
        client_nonce = kex.payload[-32:]
        tun_w.write(kex.encode())
        await tun_w.drain()

        keys = derive_session_keys(psk, server_nonce, client_nonce)
        transcript = HandshakeTranscript(hello.payload, kex.payload)
        fin = await expect(tun_r, RecordType.FINISHED)
        verify_finished(keys, transcript, Direction.SERVER, fin.payload)
        tun_w.write(TunnelRecord(RecordType.FINISHED,
                                 finished_mac(keys, transcript, Direction.CLIENT)).encode())
        await tun_w.drain()
        if self.observer:
            self.observer(identity, psk, keys)
        return keys

    async def _handle(self, app_r, app_w):
        tun_w = None
        try:
            tun_r, tun_w = await asyncio.open_connection(*self.server_addr)
            keys = await asyncio.wait_for(self.handshake(tun_r, tun_w), HANDSHAKE_TIMEOUT)
        except (NoKeysAvailable, ProtocolError, FramingError, PeerAlert, OSError,
                asyncio.TimeoutError) as exc:
            reason = type(exc).__name__
            if isinstance(exc, PeerAlert):
                reason = f"alert:{Alert(exc.code).name.lower()}" if exc.code in Alert._value2member_map_ else "alert"
            elif isinstance(exc, NoKeysAvailable):
                reason = "no_keys"
            log.warning("client proxy: refusing connection: %s", exc)
            if isinstance(exc, ProtocolError) and tun_w is not None:
                await _send_alert(tun_w, exc.alert)
            self.stats.fail(reason)
            _abort(tun_w)
            _abort(app_w)
            return
        self.stats.handshakes_ok += 1
        await self._relay(app_r, app_w, tun_r, tun_w, keys)


class ServerProxy(_Proxy):
    """Terminates QSTP sessions and connects each one to the configured upstream."""

    role = Direction.SERVER

    def __init__(self, key_manager: KeyManager, listen, upstream: tuple[str, int],
                 server_sae: Optional[str] = None, **kwargs):
        super().__init__(key_manager, listen, **kwargs)
        self.upstream = upstream
        self.server_sae = server_sae or key_manager.sae_id

    async def handshake(self, tun_r, tun_w):
        hello = server_hello(self.server_sae, self.rng)
        tun_w.write(hello.encode())
        await tun_w.drain()
        server_nonce = hello.payload[-32:]

        kex = await expect(tun_r, RecordType.CLIENT_KEY_EXCHANGE)
        raw_identity, client_nonce = parse_client_key_exchange(kex.payload)
        try:
            identity = PskIdentity.parse(raw_identity)
            psk = await self._blocking(self.km.resolve_psk, identity)
        except (BadIdentity, KmeError) as exc:
            raise ProtocolError(f"cannot resolve PSK identity: {exc}", Alert.BAD_IDENTITY)
        except KmeTransportError as exc:
            raise ProtocolError(f"KME unreachable: {exc}", Alert.HANDSHAKE_FAILURE)

        keys = derive_session_keys(psk, server_nonce, client_nonce)
        transcript = HandshakeTranscript(hello.payload, kex.payload)
        tun_w.write(TunnelRecord(RecordType.FINISHED,
                                 finished_mac(keys, transcript, Direction.SERVER)).encode())
        await tun_w.drain()
        fin = await expect(tun_r, RecordType.FINISHED)
        verify_finished(keys, transcript, Direction.CLIENT, fin.payload)
        if self.observer:
            self.observer(identity, psk, keys)
        return keys

    async def _handle(self, tun_r, tun_w):
        try:
            keys = await asyncio.wait_for(self.handshake(tun_r, tun_w), HANDSHAKE_TIMEOUT)
        except (ProtocolError, FramingError, PeerAlert, OSError, asyncio.TimeoutError) as exc:
            log.warning("server proxy: handshake failed: %s", exc)
            if isinstance(exc, ProtocolError):
                await _send_alert(tun_w, exc.alert)
            self.stats.fail(type(exc).__name__)
            _abort(tun_w)
            return
        try:
            up_r, up_w = await asyncio.open_connection(*self.upstream)
        except OSError as exc:
            log.warning("server proxy: upstream %s unreachable: %s", self.upstream, exc)
            await _send_alert(tun_w, Alert.UPSTREAM_UNREACHABLE)
            self.stats.fail("upstream_unreachable")
            _abort(tun_w)
            return
        self.stats.handshakes_ok += 1
        await self._relay(up_r, up_w, tun_r, tun_w, keys)


class EchoServer:
    """Upstream that writes back everything it reads and honours half-close."""

    def __init__(self, listen=("127.0.0.1", 0)):
        self.listen = listen
        self._server = None
        self._tasks: set = set()
        self.connections = 0

    @property
    def address(self):
        return self._server.sockets[0].getsockname()[:2]

    async def start(self):
        self._server = await asyncio.start_server(tracked(self._echo, self._tasks), *self.listen)
        return self

    async def stop(self):
        self._server.close()
        await self._server.wait_closed()
        await cancel_all(self._tasks)

    async def _echo(self, reader, writer):
        self.connections += 1
        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    break
                writer.write(data)
                await writer.drain()
            writer.close()
            await writer.wait_closed()
        except OSError:
            _abort(writer)


class LoopThread:
    """An asyncio loop on a daemon thread, for driving proxies from sync code."""

    def __init__(self, name="qkdtunnel-loop"):
        self.loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self.loop.run_forever, name=name, daemon=True)
        self._thread.start()

    def run(self, coro, timeout=None):
        return asyncio.run_coroutine_threadsafe(coro, self.loop).result(timeout)

    def close(self):
        if self.loop.is_running():
            self.loop.call_soon_threadsafe(self.loop.stop)
            self._thread.join()
        self.loop.close()
