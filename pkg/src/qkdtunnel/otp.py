"""One-time-pad transport over concatenated QKD keys.

Frame layout::

    "QOTP" | msg_len (4, BE) | key_count (2, BE) | key_count x 16-byte key_ID | ciphertext

The pad is the concatenation of the listed keys truncated to ``msg_len``; the
unused tail of the last key is thrown away.  Frames carry no MAC: the pad
hides the message but does nothing against an active attacker who flips
ciphertext bits.
"""

from __future__ import annotations

import asyncio
import enum
import logging
import os
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .aio import cancel_all, tracked
from .errors import FramingError, InvalidArgument, NoKeysAvailable, ReplayRejected, UnknownKey
from .keys import key_id_from_bytes, key_id_to_bytes

log = logging.getLogger(__name__)

MAGIC = b"QOTP"
_HEAD = struct.Struct("!4sIH")
MAX_KEYS_PER_FRAME = 0xFFFF
INGRESS_CHUNK = 65536


def xor_bytes(a: bytes, b: bytes) -> bytes:
    if len(a) != len(b):
        raise InvalidArgument(f"length mismatch: {len(a)} vs {len(b)}")
    n = len(a)
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(n, "big")


@dataclass(frozen=True)
class OtpFrame:
    key_ids: tuple[str, ...]
    ciphertext: bytes

    def encode(self) -> bytes:
        if len(self.key_ids) > MAX_KEYS_PER_FRAME:
            raise InvalidArgument("too many keys for one frame")
        return (
            _HEAD.pack(MAGIC, len(self.ciphertext), len(self.key_ids))
            + b"".join(key_id_to_bytes(k) for k in self.key_ids)
            + self.ciphertext
        )


def _check_ids(raw_ids: bytes, count: int) -> tuple[str, ...]:
    ids = tuple(key_id_from_bytes(raw_ids[16 * i : 16 * (i + 1)]) for i in range(count))
    if len(set(ids)) != len(ids):
        raise FramingError("duplicate key_ID within frame")
    return ids


def decode_frame(buf: bytes) -> tuple[OtpFrame, bytes]:
    """Parse one frame from the front of ``buf``; returns ``(frame, rest)``."""
    if len(buf) < _HEAD.size:
        raise FramingError("truncated frame header")
    magic, msg_len, count = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise FramingError("bad frame magic")
    end_ids = _HEAD.size + 16 * count
    end = end_ids + msg_len
    if len(buf) < end:
        raise FramingError(f"frame needs {end} bytes, {len(buf)} present")
    ids = _check_ids(buf[_HEAD.size : end_ids], count)
    return OtpFrame(ids, bytes(buf[end_ids:end])), bytes(buf[end:])


async def read_frame(reader: asyncio.StreamReader, max_len: int = 1 << 27) -> Optional[OtpFrame]:
    """Read one frame; ``None`` on clean EOF before any header byte."""
    try:
        head = await reader.readexactly(_HEAD.size)
    except asyncio.IncompleteReadError as exc:
        if not exc.partial:
            return None
        raise FramingError("stream ended inside a frame header") from None
    magic, msg_len, count = _HEAD.unpack(head)
    if magic != MAGIC:
        raise FramingError("bad frame magic")
    if msg_len > max_len:
        raise FramingError(f"frame of {msg_len} bytes exceeds limit")
    try:
        body = await reader.readexactly(16 * count + msg_len)
    except asyncio.IncompleteReadError:
        raise FramingError("stream ended inside a frame body") from None
    return OtpFrame(_check_ids(body[: 16 * count], count), body[16 * count :])


class OtpLedger:
    """Receiver-side record of every key_ID ever accepted.

    With ``path`` set, IDs are appended to that file and reloaded on start.
    """

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.used_key_ids: set[str] = set()
        self.lock = threading.RLock()
        if path and os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                self.used_key_ids.update(line.strip() for line in fh if line.strip())

    def __contains__(self, key_id: str) -> bool:
        return key_id in self.used_key_ids

    def __len__(self):
        return len(self.used_key_ids)

    def add_all(self, key_ids: Sequence[str]):
        with self.lock:
            self.used_key_ids.update(key_ids)
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.writelines(k + "\n" for k in key_ids)


def keys_needed(msg_len: int, key_size_bytes: int) -> int:
    return -(-msg_len // key_size_bytes)


def otp_encrypt(plaintext: bytes, take_keys: Callable[[int], list], key_size_bytes: int) -> OtpFrame:
    """Encrypt with freshly dequeued keys.

    ``take_keys(count)`` must hand out ``count`` never-used keys, e.g.
    ``functools.partial(key_manager.take_keys, peer_sae)``.
    """
    count = keys_needed(len(plaintext), key_size_bytes)
    if count > MAX_KEYS_PER_FRAME:
        raise InvalidArgument(f"message needs {count} keys, frame limit is {MAX_KEYS_PER_FRAME}")
    keys = take_keys(count) if count else []
    pad = b"".join(k.key for k in keys)
    if len(pad) < len(plaintext):
        raise InvalidArgument("key source returned keys shorter than key_size_bytes")
    return OtpFrame(tuple(k.key_ID for k in keys), xor_bytes(plaintext, pad[: len(plaintext)]))


def otp_decrypt(frame: OtpFrame, resolver: Callable[[list], list], ledger: OtpLedger) -> bytes:
    """Decrypt a frame, refusing any key_ID already in ``ledger``.

    ``resolver(key_ids)`` returns the key bytes in request order, e.g.
    ``functools.partial(key_manager.resolve_keys, sender_sae)``.
    """
    with ledger.lock:
        for kid in frame.key_ids:
            if kid in ledger:
                raise ReplayRejected(f"key_ID {kid} was already used")
        pad = b"".join(resolver(list(frame.key_ids))) if frame.key_ids else b""
        if len(pad) < len(frame.ciphertext):
            raise FramingError("listed keys are shorter than the ciphertext")
        plaintext = xor_bytes(frame.ciphertext, pad[: len(frame.ciphertext)])
        ledger.add_all(frame.key_ids)
    return plaintext


class OtpStatus(enum.IntEnum):
    OK = 0
    REPLAY = 1
    UNKNOWN_KEY = 2
    FRAMING = 3
    ERROR = 4
    NO_KEYS = 5


class OtpServer:
    """Receives frames, decrypts them and hands plaintext to ``deliver``.

    Every frame is acknowledged with a single status byte.
    """

    def __init__(self, resolver, ledger: OtpLedger, listen=("127.0.0.1", 0),
                 deliver: Callable[[bytes], None] = lambda _msg: None):
        self.resolver = resolver
        self.ledger = ledger
        self.listen = listen
        self.deliver = deliver
        self.counts = {s.name.lower(): 0 for s in OtpStatus}
        self._server = None
        self._tasks: set = set()
        self._executor = ThreadPoolExecutor(max_workers=4, thread_name_prefix="otp-server")

    @property
    def address(self):
        return self._server.sockets[0].getsockname()[:2]

    async def start(self):
        self._server = await asyncio.start_server(tracked(self._serve, self._tasks), *self.listen)
        return self

    async def stop(self):
        self._server.close()
        await self._server.wait_closed()
        await cancel_all(self._tasks)
        self._executor.shutdown(wait=False)

    def _decrypt(self, frame):
        return otp_decrypt(frame, self.resolver, self.ledger)

    async def _serve(self, reader, writer):
        loop = asyncio.get_running_loop()
        try:
            while True:
                try:
                    frame = await read_frame(reader)
                except FramingError as exc:
                    log.warning("otp server: %s", exc)
                    self.counts["framing"] += 1
                    writer.write(bytes([OtpStatus.FRAMING]))
                    break
                if frame is None:
                    break
                try:
                    msg = await loop.run_in_executor(self._executor, self._decrypt, frame)
                    self.deliver(msg)
                    status = OtpStatus.OK
                except ReplayRejected as exc:
                    log.warning("otp server: %s", exc)
                    status = OtpStatus.REPLAY
                except UnknownKey as exc:
                    log.warning("otp server: %s", exc)
                    status = OtpStatus.UNKNOWN_KEY
                except FramingError as exc:
                    log.warning("otp server: %s", exc)
                    status = OtpStatus.FRAMING
                except Exception as exc:
                    log.warning("otp server: cannot decrypt: %s", exc)
                    status = OtpStatus.ERROR
                self.counts[status.name.lower()] += 1
                writer.write(bytes([status]))
                await writer.drain()
            await writer.drain()
        except OSError:
            pass
        finally:
            writer.close()


async def send_frames(address, frames: Sequence[OtpFrame]) -> list[OtpStatus]:
    """Send frames over one connection and collect their acknowledgements."""
    reader, writer = await asyncio.open_connection(*address)
    statuses = []
    try:
        for frame in frames:
            writer.write(frame.encode())
            await writer.drain()
            ack = await reader.readexactly(1)
            statuses.append(OtpStatus(ack[0]))
    finally:
        writer.close()
        await writer.wait_closed()
    return statuses


async def _read_chunk(reader: asyncio.StreamReader, size: int) -> bytes:
    buf = bytearray()
    while len(buf) < size:
        data = await reader.read(size - len(buf))
        if not data:
            break
        buf += data
    return bytes(buf)


class OtpIngress:
    """Plain-TCP front end that OTP-encrypts application bytes toward an OtpServer.

    Each application connection is cut into frames of ``chunk`` bytes.  Once
    the application half-closes, it gets back one status byte: 0 if every
    frame was acknowledged OK, otherwise the first failing status.
    """

    def __init__(self, take_keys, key_size_bytes: int, server_addr, listen=("127.0.0.1", 0),
                 chunk: int = INGRESS_CHUNK):
        self.take_keys = take_keys
        self.key_size_bytes = key_size_bytes
        self.server_addr = server_addr
        self.listen = listen
        self.chunk = chunk
        self.frames_ok = 0
        self.frames_failed = 0
        self.keys_used = 0
        self.bytes_sent = 0
        self._server = None
        self._tasks: set = set()
        self._executor = ThreadPoolExecutor(max_workers=4, thread_name_prefix="otp-ingress")

    @property
    def address(self):
        return self._server.sockets[0].getsockname()[:2]

    async def start(self):
        self._server = await asyncio.start_server(tracked(self._serve, self._tasks), *self.listen)
        return self

    async def stop(self):
        self._server.close()
        await self._server.wait_closed()
        await cancel_all(self._tasks)
        self._executor.shutdown(wait=False)

    def _encrypt(self, data):
        return otp_encrypt(data, self.take_keys, self.key_size_bytes)

    async def _serve(self, app_r, app_w):
        loop = asyncio.get_running_loop()
        result = OtpStatus.OK
        srv_w = None
        try:
            srv_r, srv_w = await asyncio.open_connection(*self.server_addr)
            while True:
                data = await _read_chunk(app_r, self.chunk)
                if not data:
                    break
                try:
                    frame = await loop.run_in_executor(self._executor, self._encrypt, data)
                except NoKeysAvailable as exc:
                    log.warning("otp ingress: %s", exc)
                    status = OtpStatus.NO_KEYS
                else:
                    self.keys_used += len(frame.key_ids)
                    srv_w.write(frame.encode())
                    await srv_w.drain()
                    status = OtpStatus((await srv_r.readexactly(1))[0])
                if status is OtpStatus.OK:
                    self.frames_ok += 1
                    self.bytes_sent += len(data)
                else:
                    self.frames_failed += 1
                    result = status
                    break
        except (OSError, asyncio.IncompleteReadError) as exc:
            log.warning("otp ingress: server connection failed: %s", exc)
            self.frames_failed += 1
            result = OtpStatus.ERROR
        try:
            app_w.write(bytes([result]))
            await app_w.drain()
            app_w.close()
        except OSError:
            pass
        if srv_w is not None:
            srv_w.close()
