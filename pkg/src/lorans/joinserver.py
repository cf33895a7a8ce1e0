"""OTAA join handling and ABP registration.

Join requests reach this module from the central server (after dedup) on
``joinserver.in``, together with every gateway reception of the frame so the
accept can go out through the best one.
"""

from __future__ import annotations

import logging
import secrets
import time
from typing import Optional

from . import band, udp
from .central import select_gateway
from .codec import (Direction, JoinAcceptPayload, MType, PhyPayload, derive_session_keys, encrypt_join_accept,
                    mic_join, parse_phy, serialize_body)
from .config import JoinConfig
from .metrics import Metrics
from .store import Activation, DeviceRecord, DeviceSession, DuplicateDevAddr
from .worker import Worker

log = logging.getLogger(__name__)


class JoinRejected(Exception):
    pass


class UnknownDevice(JoinRejected):
    pass


class BadMic(JoinRejected):
    pass


class ReplayedDevNonce(JoinRejected):
    pass


def build_join_accept(app_key: bytes, accept: JoinAcceptPayload) -> bytes:
    """MHDR plus encrypted (payload | MIC), ready for the air."""
    msg = serialize_body(PhyPayload(MType.JOIN_ACCEPT, accept))
    mic = mic_join(msg, app_key)
    return msg[:1] + encrypt_join_accept(msg[1:] + mic, app_key)


class JoinServer(Worker):
    group = "join"
    topics = ("joinserver.in",)

    def __init__(self, bus, store, cfg: Optional[JoinConfig] = None, net_id=0x000013, metrics=None,
                 name="join", clock=time.time, downlink_power=20, rx2_freq=band.RX2_FREQ):
        super().__init__(bus, name, clock)
        self.store = store
        self.cfg = cfg or JoinConfig()
        self.net_id = net_id
        self.metrics = metrics or Metrics(name)
        self.downlink_power = downlink_power
        self.rx2_freq = rx2_freq

    def handle(self, msg):
        rec = msg.record()
        receptions = [(bytes.fromhex(g), m) for g, m in rec["receptions"]]
        try:
            self.handle_join_request(udp.unb64(rec["raw"]), receptions)
        except JoinRejected as exc:
            log.info("join rejected: %s", exc)
        self.consumer.ack(msg)

    def handle_join_request(self, raw: bytes, receptions) -> udp.TxRequest:
        """Validate one join request and publish the accept; raises on rejection."""
        phy = parse_phy(raw, Direction.UPLINK)
        req = phy.body
        dev = self.store.registry.get_device(req.dev_eui)
        if dev is None or dev.activation != Activation.OTAA:
            self.metrics.inc("join_rejects", "unknown_device")
            raise UnknownDevice(req.dev_eui.hex())
        if mic_join(raw[:-4], dev.app_key) != phy.mic:
            self.metrics.inc("join_rejects", "bad_mic")
            raise BadMic(req.dev_eui.hex())
        if not self.store.check_insert_nonce(req.dev_eui, req.dev_nonce):
            self.metrics.inc("join_rejects", "replayed_dev_nonce")
            raise ReplayedDevNonce("%s nonce %04x" % (req.dev_eui.hex(), req.dev_nonce))

        cfg = self.cfg
        app_nonce = secrets.randbits(24)
        keys = derive_session_keys(dev.app_key, app_nonce, self.net_id, req.dev_nonce)
        while True:
            # ABP devices always hold a live session, so their addresses are never handed out
            dev_addr = self.store.allocate_dev_addr(self.net_id & 0x7F)
            session = DeviceSession(dev_addr=dev_addr, dev_eui=req.dev_eui, keys=keys,
                                    rx1_dr_offset=cfg.rx1_dr_offset, rx2_dr=cfg.rx2_dr, rx_delay=cfg.rx_delay,
                                    activation=Activation.OTAA, created_at=self.clock())
            try:
                self.store.session_replace(session)
                break
            except DuplicateDevAddr:
                # lost a race with another instance for the same address
                continue

        accept = JoinAcceptPayload(app_nonce, self.net_id, dev_addr,
                                   dl_settings=(cfg.rx1_dr_offset << 4) | cfg.rx2_dr, rx_delay=cfg.rx_delay)
        raw_accept = build_join_accept(dev.app_key, accept)
        gateway = select_gateway(receptions)
        meta = next(m for g, m in receptions if g == gateway)
        tx = udp.TxRequest(
            freq=meta["freq"], datr=meta["datr"], data=raw_accept, codr=meta.get("codr", "4/5"),
            tmst=(meta["tmst"] + int(cfg.join_accept_delay1 * 1e6)) & 0xFFFFFFFF, powe=self.downlink_power,
            rx2_freq=self.rx2_freq, rx2_datr=band.DATARATES[cfg.rx2_dr],
            rx2_tmst=(meta["tmst"] + int(cfg.join_accept_delay2 * 1e6)) & 0xFFFFFFFF)
        self.bus.publish_record("downlink.tx", gateway, "downlink", dict(
            gateway_eui=gateway.hex(), dev_eui=req.dev_eui.hex(), kind="join-accept", txpk=tx.to_record()))
        self.metrics.inc("joins")
        self.store.log_frame(req.dev_eui, dict(dir="down", type="JoinAccept", dev_addr="%08x" % dev_addr,
                                               size=len(raw_accept), gateway_eui=gateway.hex()))
        return tx


def register_abp(store, dev_eui: bytes, dev_addr: int, keys, app_eui: bytes = bytes(8), description=""):
    """Register a personalised device; its session exists immediately with counters at zero."""
    rec = DeviceRecord(dev_eui=dev_eui, app_eui=app_eui, activation=Activation.ABP, dev_addr=dev_addr,
                       nwk_skey=keys.nwk_skey, app_skey=keys.app_skey, description=description)
    return store.register_device(rec)
