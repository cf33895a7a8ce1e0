import asyncio
import json

import pytest

from lorans.admin import AdminApi, AdminClient, ApiError
from lorans.sim.loadgen import Fleet, fixture_lines, gateway_eui, node_identity
from lorans.sim.node import VirtualNode

OTAA_DEV = dict(dev_eui="0102030405060708", app_eui="0000000000000001", activation="OTAA",
                app_key="2b7e151628aed2a6abf7158809cf4f3c")
ABP_DEV = dict(dev_eui="1112131415161718", activation="ABP", dev_addr="26011234",
               nwk_skey="00" * 15 + "01", app_skey="00" * 15 + "02")


@pytest.fixture
def admin(live_server):
    server = live_server()
    return server, AdminClient(server.admin.url)


def test_device_crud(admin):
    server, client = admin
    status, doc = client.add_device(**OTAA_DEV)
    assert status == 201 and doc["dev_eui"] == OTAA_DEV["dev_eui"]
    assert client.add_device(**OTAA_DEV)[0] == 409
    status, listed = client.devices()
    assert status == 200 and [d["dev_eui"] for d in listed] == [OTAA_DEV["dev_eui"]]
    assert client.request("GET", "/api/devices/" + OTAA_DEV["dev_eui"])[0] == 200
    assert client.delete_device(OTAA_DEV["dev_eui"])[0] == 200
    assert client.delete_device(OTAA_DEV["dev_eui"])[0] == 404
    assert client.request("GET", "/api/devices/" + OTAA_DEV["dev_eui"])[0] == 404


def test_keys_never_returned(admin):
    server, client = admin
    client.add_device(**ABP_DEV)
    _, dev = client.request("GET", "/api/devices/" + ABP_DEV["dev_eui"])
    _, session = client.session(ABP_DEV["dev_eui"])
    text = json.dumps([dev, session])
    assert ABP_DEV["nwk_skey"] not in text and ABP_DEV["app_skey"] not in text
    assert dev["nwk_skey"] == "<redacted>" and session["app_skey"] == "<redacted>"


def test_read_your_writes(admin):
    server, client = admin
    client.add_device(**ABP_DEV)
    # the running server sees the device without a restart
    assert server.store.registry.get_device(bytes.fromhex(ABP_DEV["dev_eui"])) is not None
    assert client.session(ABP_DEV["dev_eui"])[1]["fcnt_down"] == 0


@pytest.mark.parametrize("doc", [
    dict(dev_eui="0102"),
    dict(dev_eui="zz02030405060708", activation="OTAA", app_key="00" * 16),
    dict(dev_eui="0102030405060708", activation="OTAA"),
    dict(dev_eui="0102030405060708", activation="ABP", nwk_skey="00" * 16),
    dict(dev_eui="0102030405060708", activation="MAGIC", app_key="00" * 16),
])
def test_bad_device_records_rejected(admin, doc):
    status, body = admin[1].add_device(**doc)
    assert status == 400 and "error" in body


def test_malformed_requests(admin):
    server, client = admin
    assert client.request("POST", "/api/devices", raw=b"{not json")[0] == 400
    assert client.request("POST", "/api/devices", raw=b"[1, 2]")[0] == 400
    assert client.request("GET", "/api/nothing")[0] == 404
    assert client.request("DELETE", "/api/stats")[0] == 405
    assert client.request("GET", "/api/devices/not-an-eui")[0] in (400, 404)
    assert client.request("GET", "/api/devices/01020304")[0] == 400


def test_gateway_crud(admin):
    server, client = admin
    assert client.add_gateway(gateway_eui="aa555a0000000001", description="roof")[0] == 201
    assert client.add_gateway(gateway_eui="aa555a0000000001")[0] == 409
    assert client.add_gateway(gateway_eui="aa55")[0] == 400
    status, gws = client.gateways()
    assert [g["gateway_eui"] for g in gws] == ["aa555a0000000001"]
    assert client.delete_gateway("aa555a0000000001")[0] == 200
    assert client.delete_gateway("aa555a0000000001")[0] == 404


def test_downlink_validation(admin):
    server, client = admin
    client.add_device(**ABP_DEV)
    eui = ABP_DEV["dev_eui"]
    assert client.downlink(eui, 0, b"x")[0] == 400
    assert client.downlink(eui, 224, b"x")[0] == 400
    assert client.downlink(eui, 2, bytes(243))[0] == 400
    assert client.request("POST", "/api/devices/%s/downlink" % eui, dict(fport=2, payload_b64="!!"))[0] == 400
    assert client.downlink("0000000000000099", 2, b"x")[0] == 404
    status, doc = client.downlink(eui, 2, b"hello")
    assert status == 202 and doc["queued"] == 1


def test_fixtures_endpoint(admin):
    server, client = admin
    lines = [json.dumps(dict(kind="gateway", gateway_eui="aa555a0000000002")),
             json.dumps(dict(OTAA_DEV, kind="device")), "# comment", "", "{broken"]
    status, doc = client.load_fixtures("\n".join(lines))
    assert status == 200 and doc["loaded"] == 2 and len(doc["errors"]) == 1
    assert len(client.devices()[1]) == 1 and len(client.gateways()[1]) == 1


def test_stats_shape(admin):
    server, client = admin
    status, doc = client.stats()
    assert status == 200
    assert {"uptime", "devices", "gateways", "sessions", "modules"} <= set(doc)
    assert {"connector", "central-0", "join-0", "controller-0", "appserver"} <= set(doc["modules"])
    assert doc["modules"]["central-0"]["alive"]


def test_bearer_token(live_server):
    server = live_server(admin=dict(token="s3cret"))
    assert AdminClient(server.admin.url).stats()[0] == 401
    assert AdminClient(server.admin.url, token="wrong").stats()[0] == 401
    assert AdminClient(server.admin.url, token="s3cret").stats()[0] == 200


def test_dispatch_without_http(live_server):
    api = AdminApi(live_server())
    with pytest.raises(ApiError) as err:
        api.dispatch("PUT", "/api/devices", {}, b"")
    assert err.value.status == 405


async def inject_and_receive(server, client, payload=b"\x01\x02\x03", fport=7):
    """Queue a downlink over the API, then send one uplink and return (node, before, after, downlink)."""
    fleet = Fleet(("127.0.0.1", server.connector.port), demod_limit=None)
    fleet.add_gateway(gateway_eui(0))
    node = VirtualNode(**node_identity(0), confirmed=False, adr=False)
    fleet.add_node(node)
    loop = asyncio.get_running_loop()
    await loop.run_in_executor(None, client.load_fixtures, "\n".join(fixture_lines(fleet.nodes, [gateway_eui(0)])))
    eui = node.dev_eui.hex()
    before = (await loop.run_in_executor(None, client.session, eui))[1]["fcnt_down"]
    status, _ = await loop.run_in_executor(None, client.downlink, eui, fport, payload)
    assert status == 202
    await fleet.start()
    await fleet.uplink(0, timeout=5.0, wait=True)
    await asyncio.sleep(0.1)
    after = (await loop.run_in_executor(None, client.session, eui))[1]["fcnt_down"]
    fleet.close()
    return node, before, after, (node.received[-1] if node.received else None)


def test_injected_downlink_reaches_node(admin):
    server, client = admin
    node, before, after, dl = asyncio.run(inject_and_receive(server, client))
    assert dl is not None and dl.fport == 7 and dl.payload == b"\x01\x02\x03"
    assert after == before + 1
    _, frames = client.frames(node.dev_eui.hex())
    assert any(f["dir"] == "down" and f.get("fport") == 7 for f in frames)
