"""Device-side model of a Class-A LoRaWAN node.

All framing and crypto goes through :mod:`lorans.codec`, the same code the
server uses, so a successful exchange shows the two sides agree.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from .. import band
from ..codec import (CodecError, DataPayload, Direction, FCtrl, JoinRequestPayload, MType, PhyPayload, SessionKeys,
                     crypt_frm, decrypt_join_accept, derive_session_keys, mic_data, mic_join, parse_mac_commands,
                     parse_phy, serialize_body, serialize_mac_commands)
from ..codec import mac as maccmd
from ..codec.frames import JoinAcceptPayload
from ..codec.mac import LinkADRReq, MacCommand

ADR_ACK_LIMIT = 64
ADR_ACK_DELAY = 32


@dataclass
class Downlink:
    """What a node made of one received downlink."""

    fcnt: int
    ack: bool
    fport: Optional[int]
    payload: bytes
    mac_commands: list
    confirmed: bool
    fpending: bool


@dataclass
class VirtualNode:
    dev_eui: bytes
    app_eui: bytes = bytes(8)
    app_key: Optional[bytes] = None
    dev_addr: Optional[int] = None
    keys: Optional[SessionKeys] = None
    period: float = 40.0
    confirmed: bool = True
    payload_size: int = 10
    adr: bool = True
    dr: int = 0
    txpow_index: int = 0
    # LinkADRAns status to send, or a callable (req) -> status, for fault injection
    adr_ans_status: Union[int, Callable] = maccmd.ADR_ANS_ALL_OK
    seed: int = 0
    fcnt_up: int = 0
    fcnt_down: Optional[int] = None
    pending_ans: list = field(default_factory=list)
    received: list = field(default_factory=list)
    link_check: Optional[tuple] = None
    adr_ack_cnt: int = 0
    join_pending_nonce: Optional[int] = None
    last_plaintext: Optional[bytes] = None
    # scheduling state used by node_step
    next_uplink: float = 0.0
    join_sent_at: Optional[float] = None

    def __post_init__(self):
        self.rng = random.Random(self.seed ^ int.from_bytes(self.dev_eui, "big"))
        self.used_nonces = set()

    @property
    def otaa(self):
        return self.app_key is not None

    @property
    def joined(self):
        return self.keys is not None and self.dev_addr is not None

    @property
    def datr(self):
        return band.DATARATES[self.dr]

    # join

    def join_request(self, dev_nonce: Optional[int] = None) -> bytes:
        if not self.otaa:
            raise ValueError("ABP node does not join")
        if dev_nonce is None:
            dev_nonce = self.rng.getrandbits(16)
            while dev_nonce in self.used_nonces:
                dev_nonce = self.rng.getrandbits(16)
        self.used_nonces.add(dev_nonce)
        self.join_pending_nonce = dev_nonce
        frame = PhyPayload(MType.JOIN_REQUEST, JoinRequestPayload(self.app_eui, self.dev_eui, dev_nonce))
        msg = serialize_body(frame)
        return msg + mic_join(msg, self.app_key)

    def handle_join_accept(self, raw: bytes) -> bool:
        """Decrypt and check an accept; on success the node holds a fresh session."""
        if self.join_pending_nonce is None or len(raw) not in (17, 33) or raw[0] >> 5 != MType.JOIN_ACCEPT:
            return False
        plain = raw[:1] + decrypt_join_accept(raw[1:], self.app_key)
        if mic_join(plain[:-4], self.app_key) != plain[-4:]:
            return False
        accept: JoinAcceptPayload = parse_phy(plain).body
        self.keys = derive_session_keys(self.app_key, accept.app_nonce, accept.net_id, self.join_pending_nonce)
        self.dev_addr = accept.dev_addr
        self.fcnt_up, self.fcnt_down = 0, None
        self.pending_ans.clear()
        self.join_pending_nonce = None
        self.adr_ack_cnt = 0
        return True

    # data

    def uplink(self, payload: Optional[bytes] = None, fport: int = 1, confirmed: Optional[bool] = None) -> bytes:
        if not self.joined:
            raise ValueError("node has no session")
        if payload is None:
            payload = bytes(self.rng.getrandbits(8) for _ in range(self.payload_size))
        confirmed = self.confirmed if confirmed is None else confirmed
        fcnt = self.fcnt_up
        fopts = serialize_mac_commands(self.pending_ans, Direction.UPLINK)
        self.pending_ans = []
        adr_ack_req = self.adr and self.adr_ack_cnt >= ADR_ACK_LIMIT
        body = DataPayload(self.dev_addr, FCtrl(adr=self.adr, adr_ack_req=adr_ack_req), fcnt & 0xFFFF, fopts, fport,
                           crypt_frm(payload, self.keys.app_skey, self.dev_addr, fcnt, Direction.UPLINK))
        mtype = MType.CONFIRMED_DATA_UP if confirmed else MType.UNCONFIRMED_DATA_UP
        msg = serialize_body(PhyPayload(mtype, body))
        self.fcnt_up = (fcnt + 1) & 0xFFFFFFFF
        self.last_plaintext = payload
        self._adr_backoff()
        return msg + mic_data(msg, self.keys.nwk_skey, Direction.UPLINK, self.dev_addr, fcnt)

    def _adr_backoff(self):
        # device-side fallback when the network stops answering
        if not self.adr:
            return
        self.adr_ack_cnt += 1
        if self.adr_ack_cnt >= ADR_ACK_LIMIT + ADR_ACK_DELAY:
            if self.txpow_index > 0:
                self.txpow_index = 0
            elif self.dr > band.DR_MIN:
                self.dr -= 1
            self.adr_ack_cnt = ADR_ACK_LIMIT

    def handle_downlink(self, raw: bytes) -> Optional[Downlink]:
        """Check, decrypt and act on a data downlink; ``None`` if it is not ours."""
        if not self.joined:
            return None
        try:
            phy = parse_phy(raw, Direction.DOWNLINK)
        except CodecError:
            return None
        if not phy.mtype.is_data or phy.mtype.is_uplink or phy.body.dev_addr != self.dev_addr:
            return None
        body = phy.body
        last = -1 if self.fcnt_down is None else self.fcnt_down
        fcnt32 = None
        msg = serialize_body(phy)
        base = (last + 1) & ~0xFFFF if last >= 0 else 0
        for cand in (base | body.fcnt, (base | body.fcnt) + 0x10000):
            if cand > last and mic_data(msg, self.keys.nwk_skey, Direction.DOWNLINK, self.dev_addr, cand) == phy.mic:
                fcnt32 = cand
                break
        if fcnt32 is None:
            return None
        self.fcnt_down = fcnt32
        self.adr_ack_cnt = 0
        payload, mac_bytes = b"", body.fopts
        if body.fport == 0:
            mac_bytes = crypt_frm(body.frm_payload, self.keys.nwk_skey, self.dev_addr, fcnt32, Direction.DOWNLINK)
        elif body.fport is not None:
            payload = crypt_frm(body.frm_payload, self.keys.app_skey, self.dev_addr, fcnt32, Direction.DOWNLINK)
        try:
            cmds = parse_mac_commands(mac_bytes, Direction.DOWNLINK)
        except CodecError as exc:
            cmds = getattr(exc, "decoded", [])
        for cmd in cmds:
            self._apply(cmd)
        dl = Downlink(fcnt32, body.fctrl.ack, body.fport, payload, cmds,
                      phy.mtype == MType.CONFIRMED_DATA_DOWN, body.fctrl.fpending)
        self.received.append(dl)
        return dl

    def _apply(self, cmd: MacCommand):
        if cmd.cid == maccmd.LINK_ADR:
            req = LinkADRReq.from_command(cmd)
            status = self.adr_ans_status(req) if callable(self.adr_ans_status) else self.adr_ans_status
            if (status & maccmd.ADR_ANS_ALL_OK) == maccmd.ADR_ANS_ALL_OK:
                self.dr, self.txpow_index = req.dr, req.tx_power
            self.pending_ans.append(maccmd.link_adr_ans(status))
        elif cmd.cid == maccmd.LINK_CHECK:
            self.link_check = (cmd.payload[0], cmd.payload[1])
        elif cmd.cid == maccmd.DEV_STATUS:
            self.pending_ans.append(MacCommand(maccmd.DEV_STATUS, bytes([255, 10])))
        elif cmd.cid == maccmd.DUTY_CYCLE:
            self.pending_ans.append(MacCommand(maccmd.DUTY_CYCLE))
        elif cmd.cid == maccmd.RX_TIMING_SETUP:
            self.pending_ans.append(MacCommand(maccmd.RX_TIMING_SETUP))


def node_step(node: VirtualNode, now: float, join_retry: float = 10.0):
    """Advance one node to ``now``; returns ("join" | "uplink", frame) or None.

    An OTAA node without a session only sends join requests, retried every
    ``join_retry`` seconds. Otherwise it sends one uplink per period.
    """
    if node.otaa and not node.joined:
        if node.join_sent_at is None or now - node.join_sent_at >= join_retry:
            node.join_sent_at = now
            return "join", node.join_request()
        return None
    if now >= node.next_uplink:
        node.next_uplink += node.period
        if node.next_uplink <= now:
            node.next_uplink = now + node.period
        return "uplink", node.uplink()
    return None


def next_due(node: VirtualNode, join_retry: float = 10.0) -> float:
    if node.otaa and not node.joined:
        return (node.join_sent_at or 0.0) + join_retry
    return node.next_uplink
