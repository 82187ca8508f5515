import hashlib
import hmac
import json
import random
import struct

import pytest
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF, HKDFExpand
from hypothesis import given, settings
from hypothesis import strategies as st

from qkdtunnel.errors import FramingError, InvalidArgument, ProtocolError
from qkdtunnel.hkdf import hkdf, hkdf_expand, hkdf_extract
from qkdtunnel.key_manager import PskIdentity
from qkdtunnel.qstp import (
    MAX_PLAINTEXT,
    Alert,
    Direction,
    HandshakeTranscript,
    RecordType,
    TunnelRecord,
    client_key_exchange,
    derive_session_keys,
    finished_mac,
    open_record,
    parse_client_key_exchange,
    parse_record,
    parse_server_hello,
    seal_record,
    server_hello,
    verify_finished,
)

from conftest import SAE_A, SAE_B

C, S = Direction.CLIENT, Direction.SERVER


def seeded(seed):
    return random.Random(seed).randbytes


# -- HKDF --------------------------------------------------------------------------


def test_hkdf_rfc5869_case_1():
    ikm = bytes([0x0B]) * 22
    salt = bytes(range(13))
    info = bytes(range(0xF0, 0xFA))
    prk = hkdf_extract(salt, ikm)
    assert prk.hex() == "077709362c2e32df0ddc3f0dc47bba6390b6c73bb50f9c3122ec844ad7c2b3e5"
    assert hkdf_expand(prk, info, 42).hex() == (
        "3cb25f25faacd57a90434f64d0362f2a2d2d0a90cf1a5a4c5db02d56ecc4c5bf"
        "34007208d5b887185865")


def test_hkdf_rfc5869_case_3():
    assert hkdf(b"", bytes([0x0B]) * 22, b"", 42).hex() == (
        "8da4e775a563c18f715f802a063c5a31b8a11f5c5ee1879ec3454e5f3c738d2d"
        "9d201395faa4b61a96c8")


@settings(max_examples=100)
@given(st.binary(max_size=80), st.binary(min_size=1, max_size=80), st.binary(max_size=40),
       st.integers(1, 255 * 32))
def test_hkdf_matches_reference_implementation(salt, ikm, info, length):
    ref = HKDF(hashes.SHA256(), length, salt or None, info).derive(ikm)
    assert hkdf(salt, ikm, info, length) == ref


def test_hkdf_expand_length_limit():
    with pytest.raises(ValueError):
        hkdf_expand(b"\0" * 32, b"", 255 * 32 + 1)


# -- key schedule -------------------------------------------------------------------

PSK = bytes(range(32))
SNONCE = bytes([0xA0]) * 32
CNONCE = bytes([0xB0]) * 32


def test_key_schedule_vectors():
    k = derive_session_keys(PSK, SNONCE, CNONCE)
    assert k.client_key.hex() == "a4f8f192c2f28b50d8aaa588a9862c788f5a35ace61a463620d8cabf2b1a42e5"
    assert k.server_key.hex() == "f0bb3c6a1ab0168be8fe9ba1534520862b4847133dd8de0cef85e77ba8897adf"
    assert k.client_iv.hex() == "bdfc84b52cb958bd12f1f7ff"
    assert k.server_iv.hex() == "cd1c024053fcacb1f9bf49c3"


@settings(max_examples=50)
@given(st.binary(min_size=1, max_size=64), st.binary(min_size=32, max_size=32),
       st.binary(min_size=32, max_size=32))
def test_key_schedule_matches_reference_oracle(psk, sn, cn):
    prk = hmac.new(sn + cn, psk, hashlib.sha256).digest()

    def expand(info, n):
        return HKDFExpand(hashes.SHA256(), n, info).derive(prk)

    k = derive_session_keys(psk, sn, cn)
    assert k.secrets() == (expand(b"qstp1 c key", 32), expand(b"qstp1 s key", 32),
                           expand(b"qstp1 c iv", 12), expand(b"qstp1 s iv", 12))


def test_single_psk_bit_flip_changes_every_output():
    a = derive_session_keys(PSK, SNONCE, CNONCE)
    b = derive_session_keys(bytes([PSK[0] ^ 1]) + PSK[1:], SNONCE, CNONCE)
    for x, y in zip(a.secrets(), b.secrets()):
        assert x != y


def test_key_schedule_input_checks():
    with pytest.raises(InvalidArgument):
        derive_session_keys(b"", SNONCE, CNONCE)
    with pytest.raises(InvalidArgument):
        derive_session_keys(PSK, SNONCE[:31], CNONCE)


# -- handshake messages --------------------------------------------------------------------


def test_server_hello_golden():
    rec = server_hello(SAE_B, rng=seeded(1))
    nonce = seeded(1)(32)
    assert rec.encode() == b"\x01\x01\x00\x2d" + b"\x00\x0b" + SAE_B.encode() + nonce
    assert parse_server_hello(rec.payload) == (SAE_B, nonce)


def test_client_key_exchange_golden():
    ident = PskIdentity("K1", SAE_A)
    rec = client_key_exchange(ident, rng=seeded(2))
    body = b'{"keyId":"K1","clientId":"198.51.100.2"}'
    nonce = seeded(2)(32)
    assert rec.encode() == (bytes([2, 1]) + struct.pack("!H", 2 + len(body) + 32)
                            + struct.pack("!H", len(body)) + body + nonce)
    raw, got_nonce = parse_client_key_exchange(rec.payload)
    assert raw == body and got_nonce == nonce
    assert json.loads(raw) == {"keyId": "K1", "clientId": SAE_A}


def test_fresh_nonces_are_distinct():
    nonces = {parse_server_hello(server_hello(SAE_B).payload)[1] for _ in range(10_000)}
    assert len(nonces) == 10_000


def test_handshake_size_limits():
    with pytest.raises(InvalidArgument):
        server_hello("h" * 257)
    with pytest.raises(InvalidArgument):
        client_key_exchange(PskIdentity("k" * 1100, SAE_A))
    with pytest.raises(ProtocolError):
        parse_server_hello(b"\x00\x05abc")
    with pytest.raises(ProtocolError):
        parse_client_key_exchange(b"\x00")


def _transcript():
    sh = server_hello(SAE_B, rng=seeded(3)).encode()
    cke = client_key_exchange(PskIdentity("K1", SAE_A), rng=seeded(4)).encode()
    return HandshakeTranscript(sh, cke)


def test_finished_mac_definition():
    keys = derive_session_keys(PSK, SNONCE, CNONCE)
    tr = _transcript()
    th = hashlib.sha256(tr.server_hello_bytes + tr.client_kex_bytes).digest()
    assert finished_mac(keys, tr, C) == hmac.new(keys.client_key, b"c fin" + th,
                                                 hashlib.sha256).digest()
    assert finished_mac(keys, tr, S) == hmac.new(keys.server_key, b"s fin" + th,
                                                 hashlib.sha256).digest()


def test_finished_verification():
    keys = derive_session_keys(PSK, SNONCE, CNONCE)
    tr = _transcript()
    mac = finished_mac(keys, tr, S)
    verify_finished(keys, tr, S, mac)
    with pytest.raises(ProtocolError) as exc:
        verify_finished(keys, tr, C, mac)
    assert exc.value.alert == Alert.HANDSHAKE_FAILURE
    with pytest.raises(ProtocolError):
        verify_finished(keys, tr, S, bytes([mac[0] ^ 1]) + mac[1:])
    other = HandshakeTranscript(tr.server_hello_bytes, tr.client_kex_bytes[:-1] + b"\0")
    with pytest.raises(ProtocolError):
        verify_finished(keys, other, S, mac)
    wrong = derive_session_keys(b"\x01" + PSK[1:], SNONCE, CNONCE)
    with pytest.raises(ProtocolError):
        verify_finished(wrong, tr, S, mac)


# -- record layer --------------------------------------------------------------------------


def pair():
    return derive_session_keys(PSK, SNONCE, CNONCE), derive_session_keys(PSK, SNONCE, CNONCE)


def test_seal_open_round_trip_both_directions():
    client, server = pair()
    for i in range(5):
        msg = bytes([i]) * (i * 100)
        assert open_record(server, C, seal_record(client, C, msg)) == msg
        assert open_record(client, S, seal_record(server, S, msg)) == msg


def test_record_wire_layout():
    client, _ = pair()
    rec = seal_record(client, C, b"hello")
    raw = rec.encode()
    assert raw[:4] == b"\x04\x01\x00\x15"
    assert len(raw) == 4 + 5 + 16


def test_nonces_never_repeat():
    client, _ = pair()
    cts = {seal_record(client, C, b"same").payload for _ in range(1000)}
    assert len(cts) == 1000


def test_replay_and_reorder_rejected():
    client, server = pair()
    r0 = seal_record(client, C, b"zero")
    r1 = seal_record(client, C, b"one")
    assert open_record(server, C, r0) == b"zero"
    with pytest.raises(ProtocolError) as exc:
        open_record(server, C, r0)
    assert exc.value.alert == Alert.AUTH_FAILURE
    _, fresh = pair()
    with pytest.raises(ProtocolError):
        open_record(fresh, C, r1)


def test_direction_keys_are_separate():
    client, server = pair()
    with pytest.raises(ProtocolError):
        open_record(server, S, seal_record(client, C, b"x"))


def test_oversize_plaintext_rejected():
    client, _ = pair()
    seal_record(client, C, bytes(MAX_PLAINTEXT))
    with pytest.raises(InvalidArgument):
        seal_record(client, C, bytes(MAX_PLAINTEXT + 1))


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=2000), st.data())
def test_any_single_bit_flip_rejected(msg, data):
    client, server = pair()
    raw = bytearray(seal_record(client, C, msg).encode())
    # flipping header bits changes the type/version/length, which also must fail
    bit = data.draw(st.integers(0, len(raw) * 8 - 1))
    raw[bit // 8] ^= 1 << (bit % 8)
    with pytest.raises((ProtocolError, FramingError)):
        rec, rest = parse_record(bytes(raw))
        open_record(server, C, rec)


def test_parse_record_errors():
    good = TunnelRecord(RecordType.ALERT, b"\x01").encode()
    assert parse_record(good + b"xy") == (TunnelRecord(RecordType.ALERT, b"\x01"), b"xy")
    with pytest.raises(FramingError):
        parse_record(good[:3])
    with pytest.raises(FramingError):
        parse_record(good[:-1])
    for bad, what in ((b"\x05\x02\x00\x01\x01", "version"), (b"\x09\x01\x00\x00", "type"),
                      (b"\x04\x01\x40\x01", "length")):
        with pytest.raises(ProtocolError) as exc:
            parse_record(bad)
        assert exc.value.alert == Alert.PROTOCOL_ERROR, what


def test_open_rejects_non_data_and_short_records():
    _, server = pair()
    with pytest.raises(ProtocolError):
        open_record(server, C, TunnelRecord(RecordType.ALERT, bytes(20)))
    with pytest.raises(ProtocolError):
        open_record(server, C, TunnelRecord(RecordType.DATA, bytes(15)))
