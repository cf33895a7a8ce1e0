import os

import pytest

from lorans import udp
from lorans.codec import SessionKeys
from lorans.joinserver import BadMic, ReplayedDevNonce, UnknownDevice, register_abp
from lorans.sim.node import VirtualNode
from lorans.store import DuplicateDevAddr, DuplicateEui

from rig import Rig


def recs(rig, lsnr=5.0):
    return [(rig.gateways[0], dict(rssi=-80, lsnr=lsnr, freq=433.175, datr="SF12BW125", tmst=10_000))]


def test_closed_loop_key_agreement():
    rig = Rig()
    node = rig.otaa_node(adr=False)
    dl = rig.join(node)
    session = rig.store.session_by_eui(node.dev_eui)
    assert session.keys == node.keys and session.dev_addr == node.dev_addr
    assert session.dev_addr >> 25 == rig.cfg.nwk_id
    assert session.fcnt_up == 0 and session.fcnt_down == 0
    tx = udp.TxRequest.from_record(dl["txpk"])
    assert tx.tmst == rig.tmst + 5_000_000 and tx.rx2_tmst == rig.tmst + 6_000_000
    _, results = rig.roundtrip(node, payload=b"after join")
    assert results[0].ack
    assert udp.unb64(rig.server.appserver.uplinks(node.dev_eui.hex())[0]["payload"]) == b"after join"


def test_replayed_join_request_yields_nothing():
    rig = Rig()
    node = rig.otaa_node()
    raw = node.join_request()
    rig.send(raw)
    rig.settle()
    assert len(rig.downlinks()) == 1
    before = rig.store.session_by_eui(node.dev_eui)
    rig.clock.advance(30)
    rig.send(raw)
    rig.settle()
    assert rig.downlinks() == []
    assert rig.store.session_by_eui(node.dev_eui).keys == before.keys
    assert rig.server.joins[0].metrics.get("join_rejects", "replayed_dev_nonce") == 1


def test_direct_rejections():
    rig = Rig()
    js = rig.server.joins[0]
    node = rig.otaa_node()
    js.handle_join_request(node.join_request(dev_nonce=7), recs(rig))
    with pytest.raises(ReplayedDevNonce):
        js.handle_join_request(node.join_request(dev_nonce=7), recs(rig))
    stranger = VirtualNode(dev_eui=bytes(7) + b"\x09", app_key=os.urandom(16))
    with pytest.raises(UnknownDevice):
        js.handle_join_request(stranger.join_request(), recs(rig))
    forged = VirtualNode(dev_eui=node.dev_eui, app_key=os.urandom(16))
    nonce_count = len(rig.store.nonce_history_of(node.dev_eui))
    with pytest.raises(BadMic):
        js.handle_join_request(forged.join_request(), recs(rig))
    assert len(rig.store.nonce_history_of(node.dev_eui)) == nonce_count


def test_abp_device_cannot_join():
    rig = Rig()
    abp = rig.abp_node()
    impostor = VirtualNode(dev_eui=abp.dev_eui, app_key=os.urandom(16))
    with pytest.raises(UnknownDevice):
        rig.server.joins[0].handle_join_request(impostor.join_request(), recs(rig))


def test_rejoin_replaces_session_and_old_keys_fail():
    rig = Rig()
    node = rig.otaa_node(adr=False)
    rig.join(node)
    old_addr, old_keys = node.dev_addr, node.keys
    stale = VirtualNode(dev_eui=node.dev_eui, dev_addr=old_addr, keys=old_keys, fcnt_up=node.fcnt_up + 5)
    rig.join(node)
    assert len(rig.store.sessions()) == 1
    assert rig.store.session_by_eui(node.dev_eui).keys == node.keys != old_keys
    assert rig.send(stale.uplink()) == []
    m = rig.server.connector.metrics
    assert m.get("drops", "unknown_dev_addr") + m.get("drops", "bad_mic") == 1


def test_accept_uses_best_gateway():
    rig = Rig(gateways=3)
    node = rig.otaa_node()
    dl = rig.join(node, [(rig.gateways[0], -90, 1.0), (rig.gateways[1], -90, 4.0), (rig.gateways[2], -50, 3.0)])
    assert dl["gateway_eui"] == rig.gateways[1].hex()
    assert dl["kind"] == "join-accept"


def test_abp_registration_first_uplink_fcnt_zero():
    rig = Rig()
    node = rig.abp_node(adr=False)
    _, results = rig.roundtrip(node)
    assert results[0].ack
    assert rig.store.session_get(node.dev_addr).fcnt_up == 1


def test_abp_collisions():
    rig = Rig()
    keys = SessionKeys(bytes(16), bytes(range(16)))
    register_abp(rig.store, b"\x01" * 8, 0x26001111, keys)
    with pytest.raises(DuplicateDevAddr):
        register_abp(rig.store, b"\x02" * 8, 0x26001111, keys)
    otaa = rig.otaa_node()
    with pytest.raises(DuplicateEui):
        register_abp(rig.store, otaa.dev_eui, 0x26002222, keys)


def test_many_joins_distinct_addresses():
    rig = Rig()
    nodes = [rig.otaa_node(i) for i in range(50)]
    for node in nodes:
        rig.join(node)
    assert len({n.dev_addr for n in nodes}) == 50
    assert rig.server.joins[0].metrics.get("joins") == 50
