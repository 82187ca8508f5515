"""QSTP v1: the PSK handshake and AEAD record layer spoken between tunnel proxies.

Record framing::

    type (1) | version (1) = 1 | length (2, big-endian) | payload (length <= 16384)

Handshake, server speaks first::

    S -> C  ServerHello        hint_len(2) | hint | server_nonce(32)
    C -> S  ClientKeyExchange  id_len(2) | identity JSON | client_nonce(32)
    S -> C  Finished           HMAC(server_key, "s fin" | transcript_hash)
    C -> S  Finished           HMAC(client_key, "c fin" | transcript_hash)

``transcript_hash = SHA-256(ServerHello payload | ClientKeyExchange payload)``.
Session keys come from HKDF-SHA256 with salt ``server_nonce | client_nonce``
and the PSK as input keying material.  Data records are AES-256-GCM with
nonce ``iv XOR seq`` and the 4-byte record header as associated data.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import os
import struct
from dataclasses import dataclass
from typing import Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import InvalidArgument, FramingError, ProtocolError
from .hkdf import hkdf_expand, hkdf_extract
from .key_manager import PskIdentity

VERSION = 1
HEADER = struct.Struct("!BBH")
MAX_PAYLOAD = 16384
TAG_LEN = 16
MAX_PLAINTEXT = 16368
NONCE_LEN = 32
MAX_HINT = 256
MAX_IDENTITY = 1024
SEQ_LIMIT = 2**64 - 1

Rng = Callable[[int], bytes]


class RecordType(enum.IntEnum):
    SERVER_HELLO = 1
    CLIENT_KEY_EXCHANGE = 2
    FINISHED = 3
    DATA = 4
    ALERT = 5


class Alert(enum.IntEnum):
    HANDSHAKE_FAILURE = 1
    BAD_IDENTITY = 2
    NO_KEYS = 3
    AUTH_FAILURE = 4
    PROTOCOL_ERROR = 5
    UPSTREAM_UNREACHABLE = 6


class Direction(str, enum.Enum):
    CLIENT = "client"
    SERVER = "server"

    @property
    def peer(self) -> "Direction":
        return Direction.SERVER if self is Direction.CLIENT else Direction.CLIENT


@dataclass(frozen=True)
class TunnelRecord:
    type: int
    payload: bytes
    version: int = VERSION

    @property
    def header(self) -> bytes:
        return HEADER.pack(self.type, self.version, len(self.payload))

    def encode(self) -> bytes:
        if len(self.payload) > MAX_PAYLOAD:
            raise InvalidArgument("record payload exceeds 16384 bytes")
        return self.header + self.payload


def check_header(raw: bytes) -> tuple[int, int]:
    rtype, version, length = HEADER.unpack(raw)
    if version != VERSION:
        raise ProtocolError(f"unsupported record version {version}", Alert.PROTOCOL_ERROR)
    if rtype not in RecordType._value2member_map_:
        raise ProtocolError(f"unknown record type {rtype}", Alert.PROTOCOL_ERROR)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"record length {length} exceeds limit", Alert.PROTOCOL_ERROR)
    return rtype, length


def parse_record(buf: bytes) -> tuple[TunnelRecord, bytes]:
    """Split one record off the front of ``buf``; returns ``(record, rest)``."""
    if len(buf) < HEADER.size:
        raise FramingError("truncated record header")
    rtype, length = check_header(buf[: HEADER.size])
    end = HEADER.size + length
    if len(buf) < end:
        raise FramingError(f"record declares {length} bytes, {len(buf) - HEADER.size} present")
    return TunnelRecord(rtype, bytes(buf[HEADER.size : end])), bytes(buf[end:])


def alert_record(code: int) -> TunnelRecord:
    return TunnelRecord(RecordType.ALERT, bytes([code]))


# -- handshake messages ------------------------------------------------------------


def _prefixed(body: bytes, nonce: bytes) -> bytes:
    return struct.pack("!H", len(body)) + body + nonce


def _unprefix(payload: bytes, limit: int, what: str) -> tuple[bytes, bytes]:
    if len(payload) < 2:
        raise ProtocolError(f"truncated {what}", Alert.PROTOCOL_ERROR)
    (n,) = struct.unpack("!H", payload[:2])
    if n > limit or len(payload) != 2 + n + NONCE_LEN:
        raise ProtocolError(f"malformed {what}", Alert.PROTOCOL_ERROR)
    return payload[2 : 2 + n], payload[2 + n :]


def server_hello(server_sae: str, rng: Rng = os.urandom) -> TunnelRecord:
    hint = server_sae.encode("utf-8")
    if len(hint) > MAX_HINT:
        raise InvalidArgument("PSK identity hint longer than 256 bytes")
    return TunnelRecord(RecordType.SERVER_HELLO, _prefixed(hint, rng(NONCE_LEN)))


def parse_server_hello(payload: bytes) -> tuple[str, bytes]:
    hint, nonce = _unprefix(payload, MAX_HINT, "ServerHello")
    try:
        return hint.decode("utf-8"), nonce
    except UnicodeDecodeError:
        raise ProtocolError("hint is not UTF-8", Alert.PROTOCOL_ERROR) from None


def client_key_exchange(identity: PskIdentity, rng: Rng = os.urandom) -> TunnelRecord:
    body = identity.to_bytes()
    if len(body) > MAX_IDENTITY:
        raise InvalidArgument("serialized PSK identity longer than 1024 bytes")
    return TunnelRecord(RecordType.CLIENT_KEY_EXCHANGE, _prefixed(body, rng(NONCE_LEN)))


def parse_client_key_exchange(payload: bytes) -> tuple[bytes, bytes]:
    """Return the raw identity bytes and the client nonce."""
    return _unprefix(payload, MAX_IDENTITY, "ClientKeyExchange")


# -- key schedule ---------------------------------------------------------------------


@dataclass
class SessionKeys:
    client_key: bytes
    server_key: bytes
    client_iv: bytes
    server_iv: bytes
    send_seq: int = 0
    recv_seq: int = 0

    def key(self, direction: Direction) -> bytes:
        return self.client_key if Direction(direction) is Direction.CLIENT else self.server_key

    def iv(self, direction: Direction) -> bytes:
        return self.client_iv if Direction(direction) is Direction.CLIENT else self.server_iv

    def secrets(self) -> tuple[bytes, ...]:
        return self.client_key, self.server_key, self.client_iv, self.server_iv

    def __repr__(self):
        return f"SessionKeys(send_seq={self.send_seq}, recv_seq={self.recv_seq})"


def derive_session_keys(psk: bytes, server_nonce: bytes, client_nonce: bytes) -> SessionKeys:
    if not psk:
        raise InvalidArgument("empty PSK")
    if len(server_nonce) != NONCE_LEN or len(client_nonce) != NONCE_LEN:
        raise InvalidArgument("nonces must be 32 bytes")
    prk = hkdf_extract(server_nonce + client_nonce, psk)
    return SessionKeys(
        client_key=hkdf_expand(prk, b"qstp1 c key", 32),
        server_key=hkdf_expand(prk, b"qstp1 s key", 32),
        client_iv=hkdf_expand(prk, b"qstp1 c iv", 12),
        server_iv=hkdf_expand(prk, b"qstp1 s iv", 12),
    )


@dataclass(frozen=True)
class HandshakeTranscript:
    server_hello_bytes: bytes
    client_kex_bytes: bytes

    def digest(self) -> bytes:
        return hashlib.sha256(self.server_hello_bytes + self.client_kex_bytes).digest()


_FIN_LABEL = {Direction.CLIENT: b"c fin", Direction.SERVER: b"s fin"}


def finished_mac(keys: SessionKeys, transcript: HandshakeTranscript, role: Direction) -> bytes:
    role = Direction(role)
    return hmac.new(keys.key(role), _FIN_LABEL[role] + transcript.digest(), hashlib.sha256).digest()


def verify_finished(keys: SessionKeys, transcript: HandshakeTranscript, role: Direction,
                    mac: bytes) -> None:
    if not hmac.compare_digest(finished_mac(keys, transcript, role), mac):
        raise ProtocolError(f"{Direction(role).value} Finished MAC mismatch",
                            Alert.HANDSHAKE_FAILURE)


# -- record protection --------------------------------------------------------------------


def _nonce(iv: bytes, seq: int) -> bytes:
    return bytes(a ^ b for a, b in zip(iv, seq.to_bytes(12, "big")))


def seal_record(keys: SessionKeys, direction: Direction, plaintext: bytes) -> TunnelRecord:
    """Encrypt ``plaintext`` as the next Data record sent in ``direction``."""
    if len(plaintext) > MAX_PLAINTEXT:
        raise InvalidArgument(f"plaintext exceeds {MAX_PLAINTEXT} bytes")
    if keys.send_seq >= SEQ_LIMIT:
        raise ProtocolError("send sequence number exhausted", Alert.PROTOCOL_ERROR)
    header = HEADER.pack(RecordType.DATA, VERSION, len(plaintext) + TAG_LEN)
    ct = AESGCM(keys.key(direction)).encrypt(
        _nonce(keys.iv(direction), keys.send_seq), bytes(plaintext), header
    )
    keys.send_seq += 1
    return TunnelRecord(RecordType.DATA, ct)


def open_record(keys: SessionKeys, direction: Direction, record: TunnelRecord) -> bytes:
    """Decrypt the next Data record received from ``direction`` (the sender)."""
    if record.version != VERSION:
        raise ProtocolError("record version mismatch", Alert.PROTOCOL_ERROR)
    if record.type != RecordType.DATA:
        raise ProtocolError(f"expected Data record, got type {record.type}", Alert.PROTOCOL_ERROR)
    if keys.recv_seq >= SEQ_LIMIT:
        raise ProtocolError("receive sequence number exhausted", Alert.PROTOCOL_ERROR)
    if len(record.payload) < TAG_LEN:
        raise ProtocolError("Data record shorter than its tag", Alert.PROTOCOL_ERROR)
    # The sequence number is implicit, so replayed or reordered records fail here.
    try:
        pt = AESGCM(keys.key(direction)).decrypt(
            _nonce(keys.iv(direction), keys.recv_seq), record.payload, record.header
        )
    except InvalidTag:
        raise ProtocolError("record authentication failed", Alert.AUTH_FAILURE) from None
    keys.recv_seq += 1
    return pt
