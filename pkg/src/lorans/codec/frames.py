"""LoRaWAN 1.0.x PHYPayload layout.

Multi-byte integers are little-endian on the wire. EUIs are kept in their
conventional display order (most significant byte first) in the Python
objects and reversed when written to the wire.

Join-accept frames are handled here in their *plaintext* form
(``MHDR | body | MIC``). Over the air the body and MIC are encrypted as a
whole; see :func:`lorans.codec.crypto.encrypt_join_accept`.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import InvariantViolation, MalformedFOpts, TooShort, UnknownMType

MIC_LEN = 4
FHDR_MIN = 7
DATA_MIN_LEN = 1 + FHDR_MIN + MIC_LEN
JOIN_REQUEST_LEN = 23
JOIN_ACCEPT_LEN = 17
JOIN_ACCEPT_CFLIST_LEN = 33
MAX_FOPTS = 15


class MType(enum.IntEnum):
    JOIN_REQUEST = 0
    JOIN_ACCEPT = 1
    UNCONFIRMED_DATA_UP = 2
    UNCONFIRMED_DATA_DOWN = 3
    CONFIRMED_DATA_UP = 4
    CONFIRMED_DATA_DOWN = 5

    @property
    def is_data(self):
        return self >= MType.UNCONFIRMED_DATA_UP

    @property
    def is_uplink(self):
        return self in (MType.JOIN_REQUEST, MType.UNCONFIRMED_DATA_UP, MType.CONFIRMED_DATA_UP)

    @property
    def is_confirmed(self):
        return self in (MType.CONFIRMED_DATA_UP, MType.CONFIRMED_DATA_DOWN)


class Direction(enum.IntEnum):
    UPLINK = 0
    DOWNLINK = 1


@dataclass(frozen=True)
class FCtrl:
    """Frame control octet.

    Bit 6 means ADRACKReq on uplinks and is reserved on downlinks; bit 4 is
    FPending on downlinks and ClassB on uplinks.
    """

    adr: bool = False
    adr_ack_req: bool = False
    ack: bool = False
    fpending: bool = False
    class_b: bool = False

    def to_byte(self, fopts_len: int, direction: Direction) -> int:
        if direction == Direction.DOWNLINK:
            if self.adr_ack_req or self.class_b:
                raise InvariantViolation("ADRACKReq/ClassB are uplink-only FCtrl bits")
            bit6, bit4 = False, self.fpending
        else:
            if self.fpending:
                raise InvariantViolation("FPending is a downlink-only FCtrl bit")
            bit6, bit4 = self.adr_ack_req, self.class_b
        return (self.adr << 7) | (bit6 << 6) | (self.ack << 5) | (bit4 << 4) | fopts_len

    @classmethod
    def from_byte(cls, b: int, direction: Direction) -> "FCtrl":
        adr = bool(b & 0x80)
        ack = bool(b & 0x20)
        if direction == Direction.DOWNLINK:
            return cls(adr=adr, ack=ack, fpending=bool(b & 0x10))
        return cls(adr=adr, adr_ack_req=bool(b & 0x40), ack=ack, class_b=bool(b & 0x10))


@dataclass(frozen=True)
class DataPayload:
    dev_addr: int
    fctrl: FCtrl = field(default_factory=FCtrl)
    fcnt: int = 0
    fopts: bytes = b""
    fport: Optional[int] = None
    frm_payload: bytes = b""

    @property
    def fopts_len(self):
        return len(self.fopts)

    def check(self):
        if not 0 <= self.dev_addr <= 0xFFFFFFFF:
            raise InvariantViolation("dev_addr out of range")
        if not 0 <= self.fcnt <= 0xFFFF:
            raise InvariantViolation("wire fcnt is 16 bits")
        if len(self.fopts) > MAX_FOPTS:
            raise InvariantViolation("fopts longer than 15 bytes")
        if self.fport is None:
            if self.frm_payload:
                raise InvariantViolation("frm_payload without fport")
        else:
            if not 0 <= self.fport <= 255:
                raise InvariantViolation("fport out of range")
            if self.fport == 0 and self.fopts:
                raise InvariantViolation("fport 0 and fopts are mutually exclusive")


@dataclass(frozen=True)
class JoinRequestPayload:
    app_eui: bytes
    dev_eui: bytes
    dev_nonce: int

    def check(self):
        if len(self.app_eui) != 8 or len(self.dev_eui) != 8:
            raise InvariantViolation("EUIs are 8 bytes")
        if not 0 <= self.dev_nonce <= 0xFFFF:
            raise InvariantViolation("dev_nonce is 16 bits")


@dataclass(frozen=True)
class JoinAcceptPayload:
    app_nonce: int
    net_id: int
    dev_addr: int
    dl_settings: int = 0
    rx_delay: int = 1
    cf_list: Optional[bytes] = None

    def check(self):
        if not 0 <= self.app_nonce <= 0xFFFFFF or not 0 <= self.net_id <= 0xFFFFFF:
            raise InvariantViolation("app_nonce and net_id are 24 bits")
        if not 0 <= self.dev_addr <= 0xFFFFFFFF:
            raise InvariantViolation("dev_addr out of range")
        if not 0 <= self.dl_settings <= 0xFF or not 0 <= self.rx_delay <= 0xFF:
            raise InvariantViolation("dl_settings/rx_delay are single bytes")
        if self.cf_list is not None and len(self.cf_list) != 16:
            raise InvariantViolation("cf_list is 16 bytes")

    @property
    def rx1_dr_offset(self):
        return (self.dl_settings >> 4) & 0x07

    @property
    def rx2_dr(self):
        return self.dl_settings & 0x0F


Body = Union[DataPayload, JoinRequestPayload, JoinAcceptPayload]

_BODY_FOR = {
    MType.JOIN_REQUEST: JoinRequestPayload,
    MType.JOIN_ACCEPT: JoinAcceptPayload,
}


@dataclass(frozen=True)
class PhyPayload:
    mtype: MType
    body: Body
    mic: bytes = bytes(MIC_LEN)
    major: int = 0

    @property
    def direction(self) -> Direction:
        return Direction.UPLINK if self.mtype.is_uplink else Direction.DOWNLINK

    @property
    def mhdr(self) -> int:
        return (int(self.mtype) << 5) | (self.major & 0x03)

    def check(self):
        expected = _BODY_FOR.get(self.mtype, DataPayload)
        if not isinstance(self.body, expected):
            raise InvariantViolation(
                "%s frame cannot carry %s" % (self.mtype.name, type(self.body).__name__))
        if len(self.mic) != MIC_LEN:
            raise InvariantViolation("mic must be 4 bytes")
        if not 0 <= self.major <= 3:
            raise InvariantViolation("major is two bits")
        self.body.check()


def _eui_to_wire(eui):
    return bytes(reversed(eui))


def parse_mhdr(b: int):
    mtype = b >> 5
    if mtype > MType.CONFIRMED_DATA_DOWN:
        raise UnknownMType("mtype %d is reserved or proprietary" % mtype)
    return MType(mtype), b & 0x03


def parse_phy(raw: bytes, direction: Optional[Direction] = None) -> PhyPayload:
    """Decode wire bytes into a :class:`PhyPayload`.

    The MIC is returned as the trailing four bytes without verification.
    ``direction`` defaults to the one implied by the MType; passing it
    explicitly only matters for callers that want a mismatch rejected.
    """
    if not raw:
        raise TooShort("empty frame")
    mtype, major = parse_mhdr(raw[0])
    if direction is None:
        direction = Direction.UPLINK if mtype.is_uplink else Direction.DOWNLINK
    elif mtype.is_uplink != (direction == Direction.UPLINK):
        raise UnknownMType("%s is not a valid %s mtype" % (mtype.name, direction.name.lower()))

    mic = bytes(raw[-MIC_LEN:])
    if mtype == MType.JOIN_REQUEST:
        if len(raw) != JOIN_REQUEST_LEN:
            raise TooShort("join request must be %d bytes, got %d" % (JOIN_REQUEST_LEN, len(raw)))
        body = JoinRequestPayload(
            app_eui=_eui_to_wire(raw[1:9]),
            dev_eui=_eui_to_wire(raw[9:17]),
            dev_nonce=struct.unpack_from("<H", raw, 17)[0],
        )
        return PhyPayload(mtype, body, mic, major)

    if mtype == MType.JOIN_ACCEPT:
        if len(raw) not in (JOIN_ACCEPT_LEN, JOIN_ACCEPT_CFLIST_LEN):
            raise TooShort("join accept must be 17 or 33 bytes, got %d" % len(raw))
        app_nonce = int.from_bytes(raw[1:4], "little")
        net_id = int.from_bytes(raw[4:7], "little")
        dev_addr, dl_settings, rx_delay = struct.unpack_from("<IBB", raw, 7)
        cf_list = bytes(raw[13:29]) if len(raw) == JOIN_ACCEPT_CFLIST_LEN else None
        body = JoinAcceptPayload(app_nonce, net_id, dev_addr, dl_settings, rx_delay, cf_list)
        return PhyPayload(mtype, body, mic, major)

    if len(raw) < DATA_MIN_LEN:
        raise TooShort("data frame needs at least %d bytes, got %d" % (DATA_MIN_LEN, len(raw)))
    dev_addr, fctrl_b, fcnt = struct.unpack_from("<IBH", raw, 1)
    fopts_len = fctrl_b & 0x0F
    end = len(raw) - MIC_LEN
    fopts_end = 1 + FHDR_MIN + fopts_len
    if fopts_end > end:
        raise MalformedFOpts("fopts_len %d exceeds remaining bytes" % fopts_len)
    fopts = bytes(raw[1 + FHDR_MIN:fopts_end])
    if fopts_end < end:
        fport = raw[fopts_end]
        frm_payload = bytes(raw[fopts_end + 1:end])
    else:
        fport = None
        frm_payload = b""
    body = DataPayload(
        dev_addr=dev_addr,
        fctrl=FCtrl.from_byte(fctrl_b, direction),
        fcnt=fcnt,
        fopts=fopts,
        fport=fport,
        frm_payload=frm_payload,
    )
    return PhyPayload(mtype, body, mic, major)


def serialize_body(frame: PhyPayload) -> bytes:
    """Wire bytes of ``frame`` without the MIC (the MIC input for data and join frames)."""
    frame.check()
    out = bytearray([frame.mhdr])
    body = frame.body
    if isinstance(body, JoinRequestPayload):
        out += _eui_to_wire(body.app_eui)
        out += _eui_to_wire(body.dev_eui)
        out += struct.pack("<H", body.dev_nonce)
    elif isinstance(body, JoinAcceptPayload):
        out += body.app_nonce.to_bytes(3, "little")
        out += body.net_id.to_bytes(3, "little")
        out += struct.pack("<IBB", body.dev_addr, body.dl_settings, body.rx_delay)
        if body.cf_list is not None:
            out += body.cf_list
    else:
        out += struct.pack("<IBH", body.dev_addr,
                           body.fctrl.to_byte(len(body.fopts), frame.direction), body.fcnt)
        out += body.fopts
        if body.fport is not None:
            out.append(body.fport)
            out += body.frm_payload
    return bytes(out)


def serialize_phy(frame: PhyPayload) -> bytes:
    return serialize_body(frame) + frame.mic
