"""Central server: dedup, content dispatch and Class-A downlink scheduling.

One instance is one :class:`~lorans.worker.Worker` in the ``central``
consumer group; all state lives in the store, so instances are
interchangeable and a crashed one's messages are picked up by the others.
"""

from __future__ import annotations

import enum
import logging
import time
from typing import Optional

from . import band, udp
from .codec import (DataPayload, Direction, FCtrl, MType, PhyPayload, crypt_frm, mic_data, serialize_body)
from .codec.mac import serialize_mac_commands
from .config import CentralConfig
from .connector import envelope_from_record
from .fcnt import ahead
from .metrics import Metrics
from .store import AppItem, DedupResult, NotFound
from .worker import Worker

log = logging.getLogger(__name__)


class StaleFCnt(Exception):
    pass


class Cause(enum.Flag):
    NONE = 0
    ACK_NEEDED = enum.auto()
    QUEUED_DATA = enum.auto()
    MAC_PENDING = enum.auto()


def select_gateway(receptions) -> bytes:
    """Best gateway for the downlink: highest SNR, then RSSI, then smallest EUI."""
    if not receptions:
        raise ValueError("no receptions")
    best = min(receptions, key=lambda r: (-r[1]["lsnr"], -r[1]["rssi"], r[0]))
    return best[0]


class CentralServer(Worker):
    group = "central"
    topics = ("uplink.raw", "uplink.join", "appserver.out")

    def __init__(self, bus, store, cfg: Optional[CentralConfig] = None, metrics=None, name="central",
                 clock=time.time, sleep=time.sleep):
        super().__init__(bus, name, clock)
        self.store = store
        self.cfg = cfg or CentralConfig()
        self.metrics = metrics or Metrics(name)
        self._sleep = sleep

    def handle(self, msg):
        rec = msg.record()
        if msg.topic == "appserver.out":
            self._enqueue_app(rec)
            self.consumer.ack(msg)
            return
        if self.cfg.work_ms:
            self._sleep(self.cfg.work_ms / 1000.0)
        env = envelope_from_record(rec)
        decision = self.process_uplink(env, redelivered=msg.redelivered)
        deadline = env.received_at + self.cfg.dedup_window
        if decision == "join":
            self.call_at(deadline, self._forward_join, msg, env)
        elif decision == "data":
            self.call_at(deadline, self._finish_data, msg, env)
        else:
            self.consumer.ack(msg)

    def _enqueue_app(self, rec):
        try:
            session = self.store.session_by_eui(bytes.fromhex(rec["dev_eui"]))
            self.store.enqueue_downlink(session.dev_addr, AppItem(int(rec["fport"]), udp.unb64(rec["payload"]),
                                                                  bool(rec.get("confirmed"))))
        except (NotFound, KeyError, ValueError) as exc:
            self.metrics.inc("drops", "app_downlink")
            log.info("cannot queue app downlink: %s", exc)

    @staticmethod
    def dedup_key(env):
        phy = env.phy
        if phy.mtype == MType.JOIN_REQUEST:
            return ("join", phy.body.dev_eui.hex(), phy.body.dev_nonce, phy.mic.hex())
        return ("up", phy.body.dev_addr, env.fcnt32, phy.mic.hex())

    def process_uplink(self, env, redelivered=False) -> str:
        """Dedup then dispatch; returns "join", "data", "duplicate" or "dropped"."""
        key = self.dedup_key(env)
        meta = env.meta.summary()
        result = self.store.dedup_check_insert(key, env.gateway_eui, meta)
        takeover = False
        if result == DedupResult.DUPLICATE_COPY:
            entry = self.store.dedup_entry(key)
            if not (redelivered and entry is not None and not entry.completed
                    and any(g == env.gateway_eui for g, _ in entry.receptions[:1])):
                self.metrics.inc("duplicates")
                return "duplicate"
            takeover = True
        self.metrics.inc("uplinks")
        self.metrics.observe("dispatch_latency", self.clock() - env.received_at)
        if env.phy.mtype == MType.JOIN_REQUEST:
            self.store.log_frame(env.phy.body.dev_eui, dict(dir="up", type="JoinRequest",
                                                            dev_nonce=env.phy.body.dev_nonce, meta=meta))
            return "join"
        try:
            session = self._advance_fcnt(env, takeover)
        except StaleFCnt:
            self.metrics.inc("stale_fcnt")
            return "dropped"
        except NotFound:
            self.metrics.inc("drops", "no_session")
            return "dropped"
        self._dispatch(env, session, meta)
        return "data"

    def _advance_fcnt(self, env, takeover):
        body = env.phy.body
        fcnt32 = env.fcnt32
        window = self.cfg.fcnt_window

        def update(s):
            if not ahead(fcnt32, s.fcnt_up, window):
                if not (takeover and fcnt32 == (s.fcnt_up - 1) & 0xFFFFFFFF):
                    raise StaleFCnt("%08x fcnt %d, expected >= %d" % (s.dev_addr, fcnt32, s.fcnt_up))
            else:
                s.fcnt_up = (fcnt32 + 1) & 0xFFFFFFFF
                s.uplinks += 1
            s.adr.adr_enabled = body.fctrl.adr
            s.last_uplink_meta = dict(env.meta.summary(), gateway_eui=env.gateway_eui.hex())
            return s.copy()

        return self.store.session_update(body.dev_addr, update)

    def _dispatch(self, env, session, meta):
        body = env.phy.body
        confirmed = env.phy.mtype == MType.CONFIRMED_DATA_UP
        mac_bytes = body.fopts
        if body.fport == 0:
            mac_bytes = crypt_frm(body.frm_payload, session.keys.nwk_skey, body.dev_addr, env.fcnt32, Direction.UPLINK)
        elif body.fport is not None:
            payload = crypt_frm(body.frm_payload, session.keys.app_skey, body.dev_addr, env.fcnt32, Direction.UPLINK)
            self.bus.publish_record("appserver.in", env.raw[1:5], "app-uplink", dict(
                dev_eui=session.dev_eui.hex(), dev_addr="%08x" % body.dev_addr, fport=body.fport,
                payload=udp.b64(payload), fcnt=env.fcnt32, confirmed=confirmed, ack=body.fctrl.ack,
                gateway_eui=env.gateway_eui.hex(), meta=meta))
        self.bus.publish_record("uplink.mac", env.raw[1:5], "mac-uplink", dict(
            dev_addr="%08x" % body.dev_addr, dev_eui=session.dev_eui.hex(), fcnt=env.fcnt32,
            commands=mac_bytes.hex(), lsnr=meta["lsnr"], datr=meta["datr"], adr=body.fctrl.adr,
            ack=body.fctrl.ack))
        self.store.log_frame(session.dev_eui, dict(dir="up", type=env.phy.mtype.name, fcnt=env.fcnt32,
                                                   fport=body.fport, size=len(env.raw),
                                                   gateway_eui=env.gateway_eui.hex(), meta=meta))

    # timer callbacks, run once the dedup collection window has closed

    def _forward_join(self, msg, env):
        key = self.dedup_key(env)
        entry = self.store.dedup_entry(key)
        receptions = entry.receptions if entry else [(env.gateway_eui, env.meta.summary())]
        self.bus.publish_record("joinserver.in", env.raw[9:17], "join-request", dict(
            raw=udp.b64(env.raw), received_at=env.received_at,
            receptions=[[g.hex(), m] for g, m in receptions]))
        self.store.dedup_mark(key, completed=True)
        self.consumer.ack(msg)

    def _finish_data(self, msg, env):
        key = self.dedup_key(env)
        entry = self.store.dedup_entry(key)
        receptions = entry.receptions if entry else [(env.gateway_eui, env.meta.summary())]
        try:
            session = self.store.session_get(env.phy.body.dev_addr)
        except NotFound:
            session = None
        if session is not None:
            cause = Cause.ACK_NEEDED if env.phy.mtype == MType.CONFIRMED_DATA_UP else Cause.NONE
            tx = self.schedule_downlink(session, cause, env, receptions)
            if tx is not None:
                self.store.dedup_mark(key, downlink_sent=True)
        self.store.dedup_mark(key, completed=True)
        self.consumer.ack(msg)

    def schedule_downlink(self, session, cause: Cause, env, receptions) -> Optional[udp.TxRequest]:
        """Assemble, sign and publish the Class-A downlink answering ``env``, if any."""
        cfg = self.cfg
        dev_addr = session.dev_addr
        up_dr = band.dr_of(env.meta.datr)
        dr = band.rx1_dr(up_dr, session.rx1_dr_offset)
        if self.store.app_queue(dev_addr):
            cause |= Cause.QUEUED_DATA
        if self.store.pending_mac_bytes(dev_addr):
            cause |= Cause.MAC_PENDING
        if not cause:
            return None
        plan = self.store.dequeue_for_frame(dev_addr, band.MAX_PAYLOAD[dr], sent_after_fcnt=env.fcnt32)
        ack = bool(cause & Cause.ACK_NEEDED)
        if plan.empty and not ack:
            return None

        def take_fcnt(s):
            f = s.fcnt_down
            s.fcnt_down = (f + 1) & 0xFFFFFFFF
            return f

        fcnt_down = self.store.session_update(dev_addr, take_fcnt)
        keys = session.keys
        mac_bytes = serialize_mac_commands(plan.mac_commands, Direction.DOWNLINK)
        fopts, fport, frm = b"", None, b""
        if plan.mac_as_payload:
            fport, frm = 0, crypt_frm(mac_bytes, keys.nwk_skey, dev_addr, fcnt_down, Direction.DOWNLINK)
        else:
            fopts = mac_bytes
            if plan.app is not None:
                fport = plan.app.fport
                frm = crypt_frm(plan.app.payload, keys.app_skey, dev_addr, fcnt_down, Direction.DOWNLINK)
        confirmed = plan.app is not None and plan.app.confirmed
        body = DataPayload(dev_addr, FCtrl(adr=session.adr.adr_enabled, ack=ack, fpending=plan.fpending),
                           fcnt_down & 0xFFFF, fopts, fport, frm)
        mtype = MType.CONFIRMED_DATA_DOWN if confirmed else MType.UNCONFIRMED_DATA_DOWN
        frame = PhyPayload(mtype, body)
        msg = serialize_body(frame)
        raw = msg + mic_data(msg, keys.nwk_skey, Direction.DOWNLINK, dev_addr, fcnt_down)

        gateway = select_gateway(receptions)
        gw_meta = next(m for g, m in receptions if g == gateway)
        tx = udp.TxRequest(
            freq=gw_meta["freq"], datr=band.DATARATES[dr], data=raw,
            tmst=(gw_meta["tmst"] + int(cfg.rx1_delay * 1e6)) & 0xFFFFFFFF, codr=gw_meta.get("codr", "4/5"),
            powe=cfg.downlink_power, rx2_freq=cfg.rx2_freq, rx2_datr=band.DATARATES[session.rx2_dr],
            rx2_tmst=(gw_meta["tmst"] + int(cfg.rx2_delay * 1e6)) & 0xFFFFFFFF)
        self.bus.publish_record("downlink.tx", gateway, "downlink", dict(
            gateway_eui=gateway.hex(), dev_eui=session.dev_eui.hex(), kind="data", txpk=tx.to_record()))
        self.metrics.inc("downlinks")
        self.store.log_frame(session.dev_eui, dict(
            dir="down", type=mtype.name, fcnt=fcnt_down, fport=fport, ack=ack, fpending=plan.fpending,
            mac=mac_bytes.hex(), size=len(raw), gateway_eui=gateway.hex()))
        return tx
