"""Network controller: MAC command handling and adaptive data rate.

Every uplink's radio metadata and MAC bytes arrive on ``uplink.mac``. The
controller keeps the per-device SNR history, decides LinkADRReq adjustments
and tracks each queued command until the device answers it. A command the
device rejects (or ignores) goes back to Pending for the next downlink;
after ``max_attempts`` failures it is dropped.
"""

from __future__ import annotations

import logging
import math
import time
from typing import Optional

from . import band
from .codec import CodecError, Direction, MacCommand, parse_mac_commands
from .codec import mac as maccmd
from .codec.errors import TruncatedPayload, UnknownCid
from .codec.mac import LinkADRReq
from .config import ControllerConfig
from .metrics import Metrics
from .store import CmdState, MacCommandQueueEntry, NotFound
from .worker import Worker

log = logging.getLogger(__name__)


class UnmatchedAns(Exception):
    pass


def adr_margin(state, cfg: ControllerConfig) -> float:
    floor = cfg.demod_floor[band.sf_of_dr(state.current_dr)]
    return state.max_snr() - floor - cfg.installation_margin


def run_adr(state, cfg: Optional[ControllerConfig] = None) -> Optional[LinkADRReq]:
    """Pure ADR decision for one device; ``None`` when nothing would change.

    Positive steps raise the data rate first, then lower the power. Negative
    steps only raise the power: the data rate is never lowered here.
    """
    cfg = cfg or ControllerConfig()
    if not state.adr_enabled or not state.snr_history:
        return None
    steps = math.floor(adr_margin(state, cfg) / band.TX_POWER_STEP_DB)
    dr, pow_index = state.current_dr, state.current_txpow_index
    while steps > 0 and dr < cfg.dr_max:
        dr += 1
        steps -= 1
    while steps > 0 and pow_index < cfg.txpow_max_index:
        pow_index += 1
        steps -= 1
    while steps < 0 and pow_index > 0:
        pow_index -= 1
        steps += 1
    if (dr, pow_index) == (state.current_dr, state.current_txpow_index):
        return None
    return LinkADRReq(dr, pow_index, cfg.ch_mask)


class NetworkController(Worker):
    group = "controller"
    topics = ("uplink.mac", "controller.cmds")

    def __init__(self, bus, store, cfg: Optional[ControllerConfig] = None, metrics=None, name="controller",
                 clock=time.time):
        super().__init__(bus, name, clock)
        self.store = store
        self.cfg = cfg or ControllerConfig()
        self.metrics = metrics or Metrics(name)

    def handle(self, msg):
        rec = msg.record()
        try:
            if msg.topic == "controller.cmds":
                self.inject(rec)
            else:
                self.process_uplink_mac(rec)
        except NotFound as exc:
            log.info("controller: %s", exc)
        self.consumer.ack(msg)

    def inject(self, rec: dict):
        """Queue an operator-supplied command (``controller.cmds``)."""
        session = self.store.session_by_eui(bytes.fromhex(rec["dev_eui"]))
        cmd = MacCommand(int(rec["cid"]), bytes.fromhex(rec.get("payload", "")))
        self.store.enqueue_downlink(session.dev_addr, MacCommandQueueEntry(cmd, created_at=self.clock()), "mac")

    def process_uplink_mac(self, rec: dict):
        dev_addr = int(rec["dev_addr"], 16)
        fcnt = int(rec["fcnt"])
        try:
            cmds = parse_mac_commands(bytes.fromhex(rec.get("commands", "")), Direction.UPLINK)
        except (UnknownCid, TruncatedPayload) as exc:
            log.info("%08x: MAC stream cut short: %s", dev_addr, exc)
            cmds = exc.decoded
        except CodecError as exc:
            log.info("%08x: bad MAC stream: %s", dev_addr, exc)
            cmds = []
        for cmd in cmds:
            if cmd.cid == maccmd.LINK_CHECK:
                self._answer_link_check(dev_addr, rec)
            elif cmd.cid == maccmd.DEVICE_TIME:
                self._answer_device_time(dev_addr)
            else:
                try:
                    self.handle_mac_ans(dev_addr, cmd)
                except UnmatchedAns as exc:
                    self.metrics.inc("unmatched_ans")
                    log.info("%s", exc)
        self.expire_unanswered(dev_addr, fcnt)
        self.ingest_uplink_meta(dev_addr, float(rec["lsnr"]), band.dr_of(rec["datr"]), bool(rec.get("adr")))

    def ingest_uplink_meta(self, dev_addr: int, lsnr: float, dr: int, adr: bool) -> Optional[LinkADRReq]:
        cfg = self.cfg

        def update(s):
            s.adr.snr_history.append((lsnr, dr))
            s.adr.adr_enabled = adr
            return s.adr.copy()

        state = self.store.session_update(dev_addr, update)
        if not state.adr_enabled or len(state.snr_history) < cfg.min_samples:
            return None
        req = run_adr(state, cfg)
        if req is None:
            return None
        self.metrics.inc("adr_decisions")
        cmd = req.command()

        def enqueue(entries):
            for entry in entries:
                if entry.cmd.cid == maccmd.LINK_ADR:
                    if entry.state == CmdState.PENDING:
                        entry.cmd = cmd
                    return
            entries.append(MacCommandQueueEntry(cmd, created_at=self.clock()))

        self.store.mac_queue_update(dev_addr, enqueue)
        return req

    def handle_mac_ans(self, dev_addr: int, ans: MacCommand):
        """Match a device answer to its Sent request and settle it."""
        ok = maccmd.is_success(ans)

        def settle(entries):
            for entry in entries:
                if entry.state == CmdState.SENT and entry.cmd.cid == ans.cid:
                    if ok:
                        entries.remove(entry)
                        self._commit(dev_addr, entry.cmd)
                    else:
                        self._fail(entries, entry)
                    return True
            return False

        if not self.store.mac_queue_update(dev_addr, settle):
            raise UnmatchedAns("%08x: no Sent command for answer 0x%02x" % (dev_addr, ans.cid))
        self.metrics.inc("ans_ok" if ok else "ans_fail")
        if ans.cid == maccmd.DEV_STATUS:
            margin = ans.payload[1] & 0x3F
            if margin & 0x20:
                margin -= 0x40
            log.info("%08x status: battery %d, margin %d dB", dev_addr, ans.payload[0], margin)

    def expire_unanswered(self, dev_addr: int, fcnt: int):
        """Sent commands the device skipped in this uplink count as failures."""

        def sweep(entries):
            missed = [e for e in entries if e.state == CmdState.SENT and e.sent_after_fcnt is not None
                      and e.sent_after_fcnt < fcnt]
            for entry in missed:
                self._fail(entries, entry)
            return len(missed)

        n = self.store.mac_queue_update(dev_addr, sweep)
        if n:
            self.metrics.inc("ans_fail", n=n)

    def _fail(self, entries, entry):
        entry.attempts += 1
        if entry.attempts > self.cfg.max_attempts:
            entries.remove(entry)
            self.metrics.inc("cmd_drops")
            log.warning("dropping %s after %d failed attempts", entry.cmd.name(Direction.DOWNLINK), entry.attempts)
        else:
            entry.state = CmdState.PENDING
            entry.sent_after_fcnt = None

    def _commit(self, dev_addr, cmd: MacCommand):
        if cmd.cid != maccmd.LINK_ADR:
            return
        req = LinkADRReq.from_command(cmd)

        def commit(s):
            s.adr.current_dr = req.dr
            s.adr.current_txpow_index = req.tx_power

        self.store.session_update(dev_addr, commit)

    def _answer_link_check(self, dev_addr, rec):
        sf = band.sf_of_dr(band.dr_of(rec["datr"]))
        margin = int(max(0, min(254, round(float(rec["lsnr"]) - self.cfg.demod_floor[sf]))))
        gw_cnt = int(rec.get("gw_cnt", 1))
        self.store.enqueue_downlink(dev_addr, MacCommand(maccmd.LINK_CHECK, bytes([margin, gw_cnt])), "mac")

    def _answer_device_time(self, dev_addr):
        gps = self.clock() - 315964800 + 18
        secs = int(gps) & 0xFFFFFFFF
        frac = int((gps - int(gps)) * 256) & 0xFF
        self.store.enqueue_downlink(dev_addr, MacCommand(maccmd.DEVICE_TIME, secs.to_bytes(4, "little") +
                                                         bytes([frac])), "mac")

    def pending_commands(self, dev_addr: int, limit: int = 15) -> list:
        """Pending commands up to ``limit`` bytes; answered kinds move to Sent."""
        return self.store.take_mac_commands(dev_addr, limit)
