"""MAC command streams (FOpts or FPort 0 payloads).

Payload lengths depend on both the command id and the direction, e.g.
LinkADRReq (downlink) carries 4 bytes while LinkADRAns (uplink) carries 1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import InvariantViolation, TruncatedPayload, UnknownCid
from .frames import Direction

LINK_CHECK = 0x02
LINK_ADR = 0x03
DUTY_CYCLE = 0x04
RX_PARAM_SETUP = 0x05
DEV_STATUS = 0x06
NEW_CHANNEL = 0x07
RX_TIMING_SETUP = 0x08
TX_PARAM_SETUP = 0x09
DL_CHANNEL = 0x0A
DEVICE_TIME = 0x0D

# cid -> (name, payload length)
UPLINK_CIDS = {
    LINK_CHECK: ("LinkCheckReq", 0),
    LINK_ADR: ("LinkADRAns", 1),
    DUTY_CYCLE: ("DutyCycleAns", 0),
    RX_PARAM_SETUP: ("RXParamSetupAns", 1),
    DEV_STATUS: ("DevStatusAns", 2),
    NEW_CHANNEL: ("NewChannelAns", 1),
    RX_TIMING_SETUP: ("RXTimingSetupAns", 0),
    TX_PARAM_SETUP: ("TxParamSetupAns", 0),
    DL_CHANNEL: ("DlChannelAns", 1),
    DEVICE_TIME: ("DeviceTimeReq", 0),
}

DOWNLINK_CIDS = {
    LINK_CHECK: ("LinkCheckAns", 2),
    LINK_ADR: ("LinkADRReq", 4),
    DUTY_CYCLE: ("DutyCycleReq", 1),
    RX_PARAM_SETUP: ("RXParamSetupReq", 4),
    DEV_STATUS: ("DevStatusReq", 0),
    NEW_CHANNEL: ("NewChannelReq", 5),
    RX_TIMING_SETUP: ("RXTimingSetupReq", 1),
    TX_PARAM_SETUP: ("TxParamSetupReq", 1),
    DL_CHANNEL: ("DlChannelReq", 4),
    DEVICE_TIME: ("DeviceTimeAns", 5),
}

# server-originated commands the device answers; the rest need no ack
ANSWERED = frozenset({LINK_ADR, DUTY_CYCLE, RX_PARAM_SETUP, DEV_STATUS, NEW_CHANNEL,
                      RX_TIMING_SETUP, TX_PARAM_SETUP, DL_CHANNEL})


def _table(direction):
    return UPLINK_CIDS if direction == Direction.UPLINK else DOWNLINK_CIDS


@dataclass(frozen=True)
class MacCommand:
    cid: int
    payload: bytes = b""

    def name(self, direction: Direction) -> str:
        entry = _table(direction).get(self.cid)
        return entry[0] if entry else "0x%02x" % self.cid

    def to_bytes(self) -> bytes:
        return bytes([self.cid]) + self.payload

    def __len__(self):
        return 1 + len(self.payload)


def parse_mac_commands(stream: bytes, direction: Direction) -> list:
    table = _table(direction)
    out = []
    i = 0
    while i < len(stream):
        cid = stream[i]
        if cid not in table:
            raise UnknownCid(cid, out)
        _, size = table[cid]
        if i + 1 + size > len(stream):
            raise TruncatedPayload("0x%02x needs %d payload bytes" % (cid, size), out)
        out.append(MacCommand(cid, bytes(stream[i + 1:i + 1 + size])))
        i += 1 + size
    return out


def serialize_mac_commands(cmds, direction: Direction) -> bytes:
    table = _table(direction)
    out = bytearray()
    for cmd in cmds:
        entry = table.get(cmd.cid)
        if entry is None:
            raise InvariantViolation("unknown MAC command id 0x%02x" % cmd.cid)
        if len(cmd.payload) != entry[1]:
            raise InvariantViolation("%s takes %d bytes, got %d" % (entry[0], entry[1], len(cmd.payload)))
        out += cmd.to_bytes()
    return bytes(out)


# LinkADRReq / LinkADRAns helpers

@dataclass(frozen=True)
class LinkADRReq:
    dr: int
    tx_power: int
    ch_mask: int = 0x0007
    redundancy: int = 0x00

    def command(self) -> MacCommand:
        if not (0 <= self.dr <= 15 and 0 <= self.tx_power <= 15):
            raise InvariantViolation("dr and tx_power are nibbles")
        return MacCommand(LINK_ADR, struct.pack("<BHB", (self.dr << 4) | self.tx_power,
                                                self.ch_mask, self.redundancy))

    @classmethod
    def from_command(cls, cmd: MacCommand) -> "LinkADRReq":
        b, mask, red = struct.unpack("<BHB", cmd.payload)
        return cls(b >> 4, b & 0x0F, mask, red)


ADR_ANS_CHMASK_OK = 0x01
ADR_ANS_DR_OK = 0x02
ADR_ANS_POWER_OK = 0x04
ADR_ANS_ALL_OK = 0x07


def link_adr_ans(status: int = ADR_ANS_ALL_OK) -> MacCommand:
    return MacCommand(LINK_ADR, bytes([status & 0x07]))


def is_success(ans: MacCommand) -> bool:
    """Status of a device answer; answers without a status byte count as success."""
    if ans.cid == LINK_ADR:
        return (ans.payload[0] & ADR_ANS_ALL_OK) == ADR_ANS_ALL_OK
    if ans.cid in (RX_PARAM_SETUP,):
        return (ans.payload[0] & 0x07) == 0x07
    if ans.cid in (NEW_CHANNEL, DL_CHANNEL):
        return (ans.payload[0] & 0x03) == 0x03
    return True
