import json
import os
import random

import pytest
from hypothesis import given, settings

import oracle
from frame_strategies import frames
from lorans.codec import (BadLength, DataPayload, Direction, FCtrl, InvariantViolation,
                          JoinRequestPayload, MacCommand, MalformedFOpts, MType, PhyPayload,
                          TooShort, TruncatedPayload, UnknownCid, UnknownMType, crypt_frm,
                          decrypt_join_accept, derive_session_keys, encrypt_join_accept, mic_data,
                          mic_join, parse_mac_commands, parse_phy, serialize_body,
                          serialize_mac_commands, serialize_phy)
from lorans.codec.mac import LinkADRReq, link_adr_ans

with open(os.path.join(os.path.dirname(__file__), "data", "crypto_vectors.json")) as fh:
    VECTORS = json.load(fh)

H = bytes.fromhex


# --- frame layout ---------------------------------------------------------

def test_join_request_hand_assembled():
    raw = H("00" "0807060504030201" "1817161514131211" "3412" "aabbccdd")
    f = parse_phy(raw, Direction.UPLINK)
    assert f.mtype == MType.JOIN_REQUEST
    assert f.body == JoinRequestPayload(H("0102030405060708"), H("1112131415161718"), 0x1234)
    assert f.mic == H("aabbccdd")
    assert serialize_phy(f) == raw


def test_zero_join_request_is_23_bytes():
    f = PhyPayload(MType.JOIN_REQUEST, JoinRequestPayload(bytes(8), bytes(8), 0))
    raw = serialize_phy(f)
    assert len(raw) == 23 and raw[0] == 0x00


@pytest.mark.parametrize("raw,exc", [
    (b"", TooShort),
    (bytes(22), TooShort),
    (bytes([0x40]) + bytes(10), TooShort),
    (bytes([0xE0]) + bytes(20), UnknownMType),
    (bytes([0xC0]) + bytes(20), UnknownMType),
    (bytes([0x40, 1, 2, 3, 4, 0x05, 0, 0, 1, 2, 3, 4]), MalformedFOpts),
])
def test_parse_errors(raw, exc):
    with pytest.raises(exc):
        parse_phy(raw)


def test_unconfirmed_uplink_fields():
    body = DataPayload(0x26011BDA, FCtrl(adr=True), 0x0102, b"", 1, b"\xde\xad\xbe\xef")
    raw = serialize_phy(PhyPayload(MType.UNCONFIRMED_DATA_UP, body, b"\x01\x02\x03\x04"))
    assert raw[:5] == H("40da1b0126")
    f = parse_phy(raw, Direction.UPLINK)
    assert f.body.dev_addr == 0x26011BDA and f.body.fcnt == 0x0102
    assert f.body.frm_payload == b"\xde\xad\xbe\xef"


def test_fopts_len_nibble():
    body = DataPayload(1, FCtrl(), 7, b"\x02\x06\x03"[:3], None, b"")
    raw = serialize_phy(PhyPayload(MType.UNCONFIRMED_DATA_UP, body))
    assert raw[5] & 0x0F == 3
    assert parse_phy(raw).body.fopts == b"\x02\x06\x03"


@pytest.mark.parametrize("body,mtype", [
    (DataPayload(1, fopts=bytes(16)), MType.UNCONFIRMED_DATA_UP),
    (DataPayload(1, fopts=b"\x02", fport=0, frm_payload=b"\x06"), MType.UNCONFIRMED_DATA_UP),
    (DataPayload(1, frm_payload=b"x"), MType.UNCONFIRMED_DATA_UP),
    (DataPayload(1, fcnt=0x10000), MType.UNCONFIRMED_DATA_UP),
    (DataPayload(1, FCtrl(fpending=True)), MType.CONFIRMED_DATA_UP),
    (DataPayload(1, FCtrl(adr_ack_req=True)), MType.UNCONFIRMED_DATA_DOWN),
    (JoinRequestPayload(bytes(8), bytes(8), 0), MType.UNCONFIRMED_DATA_UP),
])
def test_serialize_invariants(body, mtype):
    with pytest.raises(InvariantViolation):
        serialize_phy(PhyPayload(mtype, body))


def test_direction_mismatch_rejected():
    raw = serialize_phy(PhyPayload(MType.UNCONFIRMED_DATA_DOWN, DataPayload(5)))
    with pytest.raises(UnknownMType):
        parse_phy(raw, Direction.UPLINK)


@settings(max_examples=1000, deadline=None)
@given(frames())
def test_roundtrip(frame):
    assert parse_phy(serialize_phy(frame), frame.direction) == frame


# --- crypto vs frozen oracle values ---------------------------------------

@pytest.mark.parametrize("v", VECTORS["mic_data"])
def test_mic_data_vectors(v):
    assert mic_data(H(v["msg"]), H(v["key"]), Direction(v["direction"]), v["dev_addr"], v["fcnt32"]) == H(v["mic"])


@pytest.mark.parametrize("v", VECTORS["mic_join"])
def test_mic_join_vectors(v):
    assert mic_join(H(v["msg"]), H(v["key"])) == H(v["mic"])


@pytest.mark.parametrize("v", VECTORS["crypt_frm"])
def test_crypt_frm_vectors(v):
    out = crypt_frm(H(v["payload"]), H(v["key"]), v["dev_addr"], v["fcnt32"], Direction(v["direction"]))
    assert out == H(v["out"])


@pytest.mark.parametrize("v", VECTORS["session_keys"])
def test_session_key_vectors(v):
    keys = derive_session_keys(H(v["app_key"]), v["app_nonce"], v["net_id"], v["dev_nonce"])
    assert keys.nwk_skey == H(v["nwk_skey"]) and keys.app_skey == H(v["app_skey"])
    assert keys.nwk_skey != keys.app_skey


@pytest.mark.parametrize("v", VECTORS["join_accept"])
def test_join_accept_vectors(v):
    assert encrypt_join_accept(H(v["plain"]), H(v["key"])) == H(v["cipher"])
    assert decrypt_join_accept(H(v["cipher"]), H(v["key"])) == H(v["plain"])


def test_published_join_request_mic():
    # DevEUI 0050AB8195000001, zero AppEUI/AppKey, DevNonce 0xE317
    jr = PhyPayload(MType.JOIN_REQUEST, JoinRequestPayload(bytes(8), H("0050AB8195000001"), 0xE317))
    assert serialize_body(jr).hex() == "0000000000000000000100009581ab500017e3"
    assert mic_join(serialize_body(jr), bytes(16)) == H("9fadbc6e")


def test_published_join_accept():
    plain = H("20248870010000248de5030201")
    m = mic_join(plain, bytes(16))
    assert m == H("88639b03")
    assert encrypt_join_accept(plain[1:] + m, bytes(16)) == H("ed8d1a7b11eacdd3f52dfc390fff77e2")


def test_join_accept_mic_before_encryption():
    key = bytes(range(16))
    plain = H("20") + bytes(range(1, 13))
    wire = encrypt_join_accept(plain[1:] + oracle.cmac4(key, plain), key)
    recovered = decrypt_join_accept(wire, key)
    assert mic_join(plain[:1] + recovered[:-4], key) == recovered[-4:]


def test_mic_avalanche():
    key = bytes(16)
    msg = H("40") + bytes(31)
    mics = set()
    for bit in range(len(msg) * 8):
        flipped = bytearray(msg)
        flipped[bit // 8] ^= 1 << (bit % 8)
        mics.add(mic_data(bytes(flipped), key, Direction.UPLINK, 0, 0))
    assert len(mics) >= 255
    assert mic_data(msg, key, Direction.UPLINK, 0, 0) not in mics


def test_mic_high_counter_bits():
    msg = H("4001000000000000")
    key = bytes(16)
    assert mic_data(msg, key, Direction.UPLINK, 1, 0x00000005) != mic_data(msg, key, Direction.UPLINK, 1, 0x00010005)


def test_tampered_dev_nonce_fails():
    key = bytes(range(16))
    jr = PhyPayload(MType.JOIN_REQUEST, JoinRequestPayload(bytes(8), bytes(8), 42))
    m = mic_join(serialize_body(jr), key)
    tampered = PhyPayload(MType.JOIN_REQUEST, JoinRequestPayload(bytes(8), bytes(8), 43))
    assert mic_join(serialize_body(tampered), key) != m


def test_crypt_frm_involution():
    rng = random.Random(3)
    assert crypt_frm(b"", bytes(16), 0, 0, Direction.UPLINK) == b""
    for _ in range(1000):
        key, pl = rng.randbytes(16), rng.randbytes(rng.randrange(0, 80))
        a, f, d = rng.getrandbits(32), rng.getrandbits(32), Direction(rng.randrange(2))
        once = crypt_frm(pl, key, a, f, d)
        assert len(once) == len(pl)
        assert crypt_frm(once, key, a, f, d) == pl


def test_session_keys_sensitivity():
    a = derive_session_keys(bytes(16), 0, 0, 0)
    b = derive_session_keys(bytes(16), 0, 0, 1)
    assert a.nwk_skey != b.nwk_skey and a.app_skey != b.app_skey
    assert derive_session_keys(bytes(16), 0, 0, 0) == a


def test_join_accept_bad_length():
    with pytest.raises(BadLength):
        encrypt_join_accept(bytes(17), bytes(16))
    rng = random.Random(1)
    for _ in range(50):
        x, k = rng.randbytes(16), rng.randbytes(16)
        assert decrypt_join_accept(encrypt_join_accept(x, k), k) == x


# --- MAC commands -----------------------------------------------------------

def test_mac_link_adr_req():
    cmds = parse_mac_commands(H("0321070001"), Direction.DOWNLINK)
    assert cmds == [MacCommand(0x03, H("21070001"))]
    req = LinkADRReq.from_command(cmds[0])
    assert (req.dr, req.tx_power, req.ch_mask, req.redundancy) == (2, 1, 0x0007, 1)
    assert req.command() == cmds[0]


def test_mac_empty_and_truncated():
    assert parse_mac_commands(b"", Direction.DOWNLINK) == []
    with pytest.raises(TruncatedPayload):
        parse_mac_commands(H("0300"), Direction.DOWNLINK)


def test_mac_unknown_cid_keeps_prefix():
    with pytest.raises(UnknownCid) as info:
        parse_mac_commands(H("0307") + H("06ff20") + H("7f0102"), Direction.UPLINK)
    assert info.value.decoded == [link_adr_ans(0x07), MacCommand(0x06, H("ff20"))]
    assert info.value.cid == 0x7F


def test_mac_direction_lengths():
    up = parse_mac_commands(H("0307") + H("06ff20"), Direction.UPLINK)
    assert [c.cid for c in up] == [3, 6]
    assert serialize_mac_commands(up, Direction.UPLINK) == H("0307") + H("06ff20")
    with pytest.raises(InvariantViolation):
        serialize_mac_commands([MacCommand(0x03, b"\x07")], Direction.DOWNLINK)
