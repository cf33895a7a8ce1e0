"""Gateway-facing edge of the network server.

Terminates the packet-forwarder UDP protocol, drops traffic from unknown
gateways and frames that fail their integrity check, and publishes the rest:
data frames on ``uplink.raw``, join requests (unverified, the join server
owns the AppKey) on ``uplink.join``.
"""

from __future__ import annotations

import logging
import secrets
import socket
import threading
import time
from dataclasses import dataclass
from typing import Optional

from . import udp
from .bus import BufferFull
from .codec import CodecError, Direction, MType, mic_data, parse_phy, serialize_body
from .fcnt import candidates
from .metrics import Metrics
from .store import NotFound

log = logging.getLogger(__name__)


class NoRoute(Exception):
    """No PullData has been seen from the gateway, so there is nowhere to send."""


@dataclass
class UplinkEnvelope:
    phy: object
    raw: bytes
    meta: udp.RxMetadata
    gateway_eui: bytes
    received_at: float
    fcnt32: Optional[int] = None

    def record(self) -> dict:
        return dict(raw=udp.b64(self.raw), gateway_eui=self.gateway_eui.hex(), meta=self.meta.summary(),
                    received_at=self.received_at, fcnt32=self.fcnt32)


def envelope_from_record(rec: dict) -> UplinkEnvelope:
    raw = udp.unb64(rec["raw"])
    m = rec["meta"]
    meta = udp.RxMetadata(rssi=m["rssi"], lsnr=m["lsnr"], freq=m["freq"], datr=m["datr"], codr=m.get("codr", "4/5"),
                          tmst=m.get("tmst", 0), chan=m.get("chan", 0), rfch=m.get("rfch", 0), data=raw)
    return UplinkEnvelope(parse_phy(raw), raw, meta, bytes.fromhex(rec["gateway_eui"]), rec["received_at"],
                          rec.get("fcnt32"))


class Connector:
    def __init__(self, bus, store, host="0.0.0.0", port=1700, metrics=None, clock=time.time, name="connector"):
        self.bus = bus
        self.store = store
        self.host = host
        self.port = port
        self.clock = clock
        self.name = name
        self.metrics = metrics or Metrics(name)
        self.sock = None
        self._threads = []
        self._running = threading.Event()
        self._downlinks = None
        self.busy_seconds = 0.0

    # socket plumbing

    def start(self):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4 << 20)
        self.sock.bind((self.host, self.port))
        self.sock.settimeout(0.2)
        self.port = self.sock.getsockname()[1]
        self._downlinks = self.bus.subscribe("downlink.tx", "connector")
        self._running.set()
        for target in (self._rx_loop, self._tx_loop):
            th = threading.Thread(target=target, name="%s-%s" % (self.name, target.__name__), daemon=True)
            th.start()
            self._threads.append(th)
        return self

    def stop(self):
        self._running.clear()
        for th in self._threads:
            th.join(2.0)
        if self._downlinks is not None:
            self.bus.unsubscribe(self._downlinks)
        if self.sock is not None:
            self.sock.close()

    def _rx_loop(self):
        while self._running.is_set():
            try:
                raw, addr = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                break
            t0 = time.perf_counter()
            for reply in self.handle_datagram(raw, addr):
                try:
                    self.sock.sendto(udp.encode_datagram(reply), addr)
                except OSError as exc:
                    log.warning("reply to %s failed: %s", addr, exc)
            self.busy_seconds += time.perf_counter() - t0

    def _tx_loop(self):
        while self._running.is_set():
            msg = self._downlinks.get(timeout=0.2)
            if msg is None:
                continue
            rec = msg.record()
            try:
                self.send_downlink(udp.TxRequest.from_record(rec["txpk"]), bytes.fromhex(rec["gateway_eui"]))
            except NoRoute:
                self.metrics.inc("drops", "no_route")
            except OSError as exc:
                log.warning("downlink send failed: %s", exc)
            self._downlinks.ack(msg)

    # protocol handling (socket-free, so tests can call it directly)

    def handle_datagram(self, raw: bytes, addr) -> list:
        try:
            d = udp.decode_datagram(raw)
        except udp.ProtocolError as exc:
            self.metrics.inc("drops", "bad_datagram")
            log.debug("bad datagram from %s: %s", addr, exc)
            return []
        if d.kind == udp.Kind.PUSH_DATA:
            return self.handle_push_data(d, addr)[1]
        if d.kind == udp.Kind.PULL_DATA:
            return self.handle_pull_data(d, addr)
        if d.kind == udp.Kind.TX_ACK:
            self.handle_tx_ack(d)
        return []

    def handle_push_data(self, d: udp.ForwarderDatagram, addr):
        """Returns (published envelopes, replies)."""
        if not self.store.registry.is_registered(d.gateway_eui):
            self.metrics.inc("drops", "unregistered_gateway")
            return [], []
        self.store.registry.touch_gateway(d.gateway_eui, now=self.clock())
        self.metrics.inc("acks")
        published = []
        now = self.clock()
        for pk in d.rxpk:
            env = self._verify(pk, d.gateway_eui, now)
            if env is None:
                continue
            topic = "uplink.join" if env.phy.mtype == MType.JOIN_REQUEST else "uplink.raw"
            key = env.raw[1:5] if topic == "uplink.raw" else env.raw[9:17]
            try:
                self.bus.publish_record(topic, key, "uplink", env.record())
            except BufferFull:
                self.metrics.inc("drops", "backpressure")
                continue
            self.metrics.inc("uplinks_ok")
            published.append(env)
        return published, [udp.ack_for(d)]

    def _verify(self, pk, gateway_eui, now) -> Optional[UplinkEnvelope]:
        try:
            meta = udp.RxMetadata.from_rxpk(pk)
            phy = parse_phy(meta.data, Direction.UPLINK)
        except (udp.ProtocolError, CodecError) as exc:
            self.metrics.inc("drops", "parse_error")
            log.debug("unparseable rxpk: %s", exc)
            return None
        env = UplinkEnvelope(phy, meta.data, meta, gateway_eui, now)
        if phy.mtype == MType.JOIN_REQUEST:
            return env
        try:
            session = self.store.session_get(phy.body.dev_addr)
        except NotFound:
            self.metrics.inc("drops", "unknown_dev_addr")
            return None
        msg = serialize_body(phy)
        for fcnt32 in candidates(session.fcnt_up, phy.body.fcnt):
            if mic_data(msg, session.keys.nwk_skey, Direction.UPLINK, phy.body.dev_addr, fcnt32) == phy.mic:
                env.fcnt32 = fcnt32
                return env
        self.metrics.inc("drops", "bad_mic")
        return None

    def handle_pull_data(self, d: udp.ForwarderDatagram, addr) -> list:
        if not self.store.registry.is_registered(d.gateway_eui):
            self.metrics.inc("drops", "unregistered_gateway")
            return []
        self.store.registry.touch_gateway(d.gateway_eui, endpoint=addr, now=self.clock())
        self.metrics.inc("acks")
        return [udp.ack_for(d)]

    def handle_tx_ack(self, d: udp.ForwarderDatagram):
        err = ((d.json or {}).get("txpk_ack") or {}).get("error", "NONE")
        self.metrics.inc("tx_acks", err)

    def send_downlink(self, tx: udp.TxRequest, gateway_eui: bytes):
        gw = self.store.registry.get_gateway(gateway_eui)
        if gw is None or gw.last_pull_endpoint is None:
            raise NoRoute(gateway_eui.hex())
        datagram = udp.pull_resp(secrets.randbits(16), tx)
        self.sock.sendto(udp.encode_datagram(datagram), tuple(gw.last_pull_endpoint))
        self.metrics.inc("downlinks")
        return datagram
