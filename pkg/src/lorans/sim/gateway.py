"""Virtual packet-forwarder gateways speaking the UDP protocol over real sockets."""

from __future__ import annotations

import asyncio
import logging
import random
import time
from collections import OrderedDict
from typing import Callable, Optional

from .. import band, udp

log = logging.getLogger(__name__)

RSSI_RANGE = (-118.0, -60.0)
SNR_RANGE = (-16.5, 10.0)
JOIN_ACCEPT_DELAY_US = 5_000_000
RX1_DELAY_US = 1_000_000


class RadioModel:
    """Static per-link means plus Gaussian jitter, reproducible from ``seed``."""

    def __init__(self, seed=0, rssi_range=RSSI_RANGE, snr_range=SNR_RANGE, jitter_db=1.0):
        self.seed = seed
        self.rssi_range = rssi_range
        self.snr_range = snr_range
        self.jitter_db = jitter_db
        self._links = {}
        self._rng = random.Random("jitter:%d" % seed)

    def link(self, node_id: bytes, gateway_eui: bytes):
        key = (node_id, gateway_eui)
        mean = self._links.get(key)
        if mean is None:
            rng = random.Random("%d:%s:%s" % (self.seed, node_id.hex(), gateway_eui.hex()))
            mean = self._links[key] = (rng.uniform(*self.rssi_range), rng.uniform(*self.snr_range))
        return mean

    def sample(self, node_id: bytes, gateway_eui: bytes):
        rssi, snr = self.link(node_id, gateway_eui)
        rssi = min(max(rssi + self._rng.gauss(0, self.jitter_db), self.rssi_range[0]), self.rssi_range[1])
        snr = min(max(snr + self._rng.gauss(0, self.jitter_db), self.snr_range[0]), self.snr_range[1])
        return int(round(rssi)), round(snr, 1)


class VirtualGateway(asyncio.DatagramProtocol):
    """One gateway: pushes receptions upstream and hands PULL_RESP frames back to nodes.

    Downlinks are matched to the uplink they answer through the ``tmst`` the
    server echoes (uplink tmst + RX1 delay, or + join-accept delay).
    """

    def __init__(self, eui: bytes, server, radio: Optional[RadioModel] = None, demod_limit: Optional[int] = 8,
                 keepalive=10.0, on_downlink: Optional[Callable] = None, channels=band.UPLINK_CHANNELS):
        self.eui = eui
        self.server = server
        self.radio = radio or RadioModel()
        self.demod_limit = demod_limit
        self.keepalive = keepalive
        self.on_downlink = on_downlink
        self.channels = channels
        self.transport = None
        self._t0 = time.monotonic()
        self._token = random.Random(eui).getrandbits(16)
        self._pending = OrderedDict()   # tmst -> node key
        self._in_air = []               # end times of receptions being demodulated
        self._keepalive_task = None
        self.connected = asyncio.Event()
        self.stats = dict(pushed=0, push_acks=0, pull_acks=0, downlinks=0, unmatched=0, demod_drops=0)

    async def start(self):
        loop = asyncio.get_running_loop()
        await loop.create_datagram_endpoint(lambda: self, remote_addr=self.server)
        self._keepalive_task = loop.create_task(self._pull_loop())
        return self

    def close(self):
        if self._keepalive_task is not None:
            self._keepalive_task.cancel()
        if self.transport is not None:
            self.transport.close()

    async def _pull_loop(self):
        while True:
            self._send(udp.ForwarderDatagram(udp.Kind.PULL_DATA, self._next_token(), self.eui))
            await asyncio.sleep(self.keepalive)

    def connection_made(self, transport):
        self.transport = transport

    def error_received(self, exc):
        log.debug("gateway %s socket error: %s", self.eui.hex(), exc)

    def _next_token(self):
        self._token = (self._token + 1) & 0xFFFF
        return self._token

    def _send(self, d):
        self.transport.sendto(udp.encode_datagram(d))

    def tmst(self) -> int:
        return int((time.monotonic() - self._t0) * 1e6) & 0xFFFFFFFF

    def receive(self, node_key, node_id: bytes, raw: bytes, datr: str, radio=None, chan=None) -> bool:
        """Radio reception of one frame; returns False if the demodulators were all busy."""
        now = time.monotonic()
        if self.demod_limit is not None:
            self._in_air = [t for t in self._in_air if t > now]
            if len(self._in_air) >= self.demod_limit:
                self.stats["demod_drops"] += 1
                return False
            self._in_air.append(now + band.airtime(len(raw), udp.datr_sf(datr)))
        rssi, lsnr = radio if radio is not None else self.radio.sample(node_id, self.eui)
        tmst = self.tmst()
        while tmst in self._pending:
            tmst = (tmst + 1) & 0xFFFFFFFF
        self._pending[tmst] = node_key
        while len(self._pending) > 65536:
            self._pending.popitem(last=False)
        chan = chan if chan is not None else raw[-1] % len(self.channels)
        meta = udp.RxMetadata(rssi=rssi, lsnr=lsnr, freq=self.channels[chan], datr=datr, tmst=tmst, chan=chan,
                              data=raw)
        self._send(udp.push_data(self._next_token(), self.eui, [meta]))
        self.stats["pushed"] += 1
        return True

    def datagram_received(self, data, addr):
        try:
            d = udp.decode_datagram(data)
        except udp.ProtocolError as exc:
            log.debug("gateway %s: bad datagram: %s", self.eui.hex(), exc)
            return
        if d.kind == udp.Kind.PUSH_ACK:
            self.stats["push_acks"] += 1
        elif d.kind == udp.Kind.PULL_ACK:
            self.stats["pull_acks"] += 1
            self.connected.set()
        elif d.kind == udp.Kind.PULL_RESP:
            self._downlink(d)

    def _downlink(self, d):
        now = time.monotonic()
        try:
            tx = udp.TxRequest.from_txpk(d.json["txpk"])
        except (udp.ProtocolError, KeyError, TypeError) as exc:
            self._send(udp.tx_ack(d.token, self.eui, "TX_FREQ"))
            log.debug("gateway %s: bad txpk: %s", self.eui.hex(), exc)
            return
        self._send(udp.tx_ack(d.token, self.eui))
        self.stats["downlinks"] += 1
        # both delays can match different uplinks; the receiver sorts it out
        candidates = []
        for delay in (RX1_DELAY_US, JOIN_ACCEPT_DELAY_US):
            up = ((tx.tmst or 0) - delay) & 0xFFFFFFFF
            if up in self._pending:
                candidates.append(self._pending[up])
        if not candidates:
            self.stats["unmatched"] += 1
            return
        if self.on_downlink is not None:
            self.on_downlink(candidates, tx, self.eui, now)
