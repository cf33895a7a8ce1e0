"""Synchronous server rig: real modules, fake clock, no sockets."""

from __future__ import annotations

import os

from lorans import udp
from lorans.codec import SessionKeys
from lorans.config import ServerConfig
from lorans.joinserver import register_abp
from lorans.server import NetworkServer
from lorans.sim.node import VirtualNode
from lorans.store import Activation, DeviceRecord, GatewayRecord


class Clock:
    def __init__(self, t=1_700_000_000.0):
        self.t = t

    def __call__(self):
        return self.t

    def advance(self, dt):
        self.t += dt


def gw_eui(i):
    return bytes.fromhex("aa555a00000000%02x" % i)


class Rig:
    """Network server driven step by step.

    ``send`` pushes an uplink through the connector as one or more gateways,
    ``settle`` runs workers and fires the dedup timers, ``downlinks`` returns
    what the server asked the gateways to transmit.
    """

    def __init__(self, gateways=1, cfg=None):
        self.clock = Clock()
        self.cfg = cfg or ServerConfig()
        self.server = NetworkServer(self.cfg, clock=self.clock).subscribe()
        self.store = self.server.store
        self.bus = self.server.bus
        self.tap = self.bus.subscribe("downlink.tx", "test-tap")
        self.tmst = 1_000_000
        self.gateways = [gw_eui(i) for i in range(gateways)]
        for eui in self.gateways:
            self.store.register_gateway(GatewayRecord(eui))
        self.token = 0

    @property
    def central(self):
        return self.server.centrals[0]

    def otaa_node(self, n=0, **kw):
        node = VirtualNode(dev_eui=bytes.fromhex("00a0b0c0d0e0%04x" % n), app_key=os.urandom(16), **kw)
        self.store.register_device(DeviceRecord(node.dev_eui, node.app_eui, Activation.OTAA, app_key=node.app_key))
        return node

    def abp_node(self, n=0, **kw):
        keys = SessionKeys(os.urandom(16), os.urandom(16))
        node = VirtualNode(dev_eui=bytes.fromhex("00b0c0d0e0f0%04x" % n), dev_addr=0x26000000 + n, keys=keys, **kw)
        register_abp(self.store, node.dev_eui, node.dev_addr, keys)
        return node

    def send(self, raw, receptions=None, datr="SF12BW125"):
        """Push ``raw`` via each (gateway_eui, rssi, lsnr); returns the published envelopes."""
        if receptions is None:
            receptions = [(self.gateways[0], -80, 5.0)]
        self.tmst += 3_000_000
        out = []
        for eui, rssi, lsnr in receptions:
            meta = udp.RxMetadata(rssi=rssi, lsnr=lsnr, freq=433.175, datr=datr, tmst=self.tmst, data=raw)
            self.token += 1
            published, _ = self.server.connector.handle_push_data(udp.push_data(self.token, eui, [meta]), None)
            out.extend(published)
        return out

    def settle(self, dt=0.5):
        self.server.drain()
        self.clock.advance(dt)
        self.server.drain()

    def downlinks(self):
        out = []
        while True:
            msg = self.tap.get(timeout=0)
            if msg is None:
                return out
            self.tap.ack(msg)
            out.append(msg.record())

    def join(self, node, receptions=None):
        self.send(node.join_request(), receptions, node.datr)
        self.settle()
        dls = self.downlinks()
        assert len(dls) == 1, dls
        assert node.handle_join_accept(udp.TxRequest.from_record(dls[0]["txpk"]).data)
        return dls[0]

    def roundtrip(self, node, receptions=None, **kw):
        """One uplink, then hand every resulting downlink to the node."""
        self.send(node.uplink(**kw), receptions, node.datr)
        self.settle()
        dls = self.downlinks()
        results = [node.handle_downlink(udp.TxRequest.from_record(d["txpk"]).data) for d in dls]
        return dls, results
