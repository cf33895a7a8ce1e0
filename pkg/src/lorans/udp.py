"""Gateway <-> server UDP datagrams (packet-forwarder protocol, version 2).

Layout: ``0x02 | token(2, big-endian) | kind | [gateway EUI(8)] | [JSON]``.
"""

from __future__ import annotations

import base64
import binascii
import enum
import json
import re
from dataclasses import dataclass, field
from typing import Optional

PROTOCOL_VERSION = 0x02
_DATR = re.compile(r"^SF(7|8|9|10|11|12)BW(125|250|500)$")


class ProtocolError(ValueError):
    pass


class BadVersion(ProtocolError):
    pass


class BadKind(ProtocolError):
    pass


class TooShort(ProtocolError):
    pass


class BadJson(ProtocolError):
    pass


class InvariantViolation(ProtocolError):
    pass


class Kind(enum.IntEnum):
    PUSH_DATA = 0x00
    PUSH_ACK = 0x01
    PULL_DATA = 0x02
    PULL_RESP = 0x03
    PULL_ACK = 0x04
    TX_ACK = 0x05


_WITH_EUI = {Kind.PUSH_DATA, Kind.PULL_DATA, Kind.TX_ACK}
_WITH_JSON = {Kind.PUSH_DATA, Kind.PULL_RESP, Kind.TX_ACK}


@dataclass
class ForwarderDatagram:
    kind: Kind
    token: int
    gateway_eui: Optional[bytes] = None
    json: Optional[dict] = None
    version: int = PROTOCOL_VERSION

    def check(self):
        if self.version != PROTOCOL_VERSION:
            raise InvariantViolation("only protocol version 2 is supported")
        if not 0 <= self.token <= 0xFFFF:
            raise InvariantViolation("token is 16 bits")
        if self.kind in _WITH_EUI:
            if self.gateway_eui is None or len(self.gateway_eui) != 8:
                raise InvariantViolation("%s needs an 8-byte gateway EUI" % self.kind.name)
        elif self.gateway_eui is not None:
            raise InvariantViolation("%s carries no gateway EUI" % self.kind.name)
        if self.kind not in _WITH_JSON and self.json is not None:
            raise InvariantViolation("%s carries no JSON" % self.kind.name)
        if self.kind in (Kind.PUSH_DATA, Kind.PULL_RESP) and self.json is None:
            raise InvariantViolation("%s needs a JSON object" % self.kind.name)

    @property
    def rxpk(self):
        return (self.json or {}).get("rxpk", [])


def decode_datagram(raw: bytes) -> ForwarderDatagram:
    if len(raw) < 4:
        raise TooShort("datagram shorter than 4 bytes")
    if raw[0] != PROTOCOL_VERSION:
        raise BadVersion("protocol version %d" % raw[0])
    try:
        kind = Kind(raw[3])
    except ValueError:
        raise BadKind("unknown datagram kind 0x%02x" % raw[3]) from None
    token = int.from_bytes(raw[1:3], "big")
    offset = 4
    eui = None
    if kind in _WITH_EUI:
        if len(raw) < 12:
            raise TooShort("%s needs a gateway EUI" % kind.name)
        eui = bytes(raw[4:12])
        offset = 12
    doc = None
    rest = raw[offset:]
    if kind in _WITH_JSON and rest:
        try:
            doc = json.loads(rest.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise BadJson(str(exc)) from None
        if not isinstance(doc, dict):
            raise BadJson("top-level JSON value must be an object")
    elif kind in (Kind.PUSH_DATA, Kind.PULL_RESP):
        raise BadJson("%s without JSON body" % kind.name)
    return ForwarderDatagram(kind, token, eui, doc)


def encode_datagram(d: ForwarderDatagram) -> bytes:
    d.check()
    out = bytes([d.version]) + d.token.to_bytes(2, "big") + bytes([d.kind])
    if d.gateway_eui is not None:
        out += d.gateway_eui
    if d.json is not None:
        out += json.dumps(d.json, separators=(",", ":")).encode("utf-8")
    return out


def ack_for(d: ForwarderDatagram) -> Optional[ForwarderDatagram]:
    if d.kind == Kind.PUSH_DATA:
        return ForwarderDatagram(Kind.PUSH_ACK, d.token)
    if d.kind == Kind.PULL_DATA:
        return ForwarderDatagram(Kind.PULL_ACK, d.token)
    return None


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    try:
        return base64.b64decode(text, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise BadJson("bad base64: %s" % exc) from None


def datr_sf(datr: str) -> int:
    m = _DATR.match(datr)
    if not m:
        raise BadJson("bad datr %r" % datr)
    return int(m.group(1))


@dataclass
class RxMetadata:
    """One rxpk entry: radio metadata plus the raw PHYPayload."""

    rssi: int
    lsnr: float
    freq: float
    datr: str
    codr: str = "4/5"
    tmst: int = 0
    chan: int = 0
    rfch: int = 0
    data: bytes = b""
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_rxpk(cls, pk: dict) -> "RxMetadata":
        try:
            datr = pk["datr"]
            datr_sf(datr)
            data = unb64(pk["data"])
            meta = cls(rssi=int(pk["rssi"]), lsnr=float(pk["lsnr"]), freq=float(pk["freq"]), datr=datr,
                       codr=pk.get("codr", "4/5"), tmst=int(pk.get("tmst", 0)) & 0xFFFFFFFF,
                       chan=int(pk.get("chan", 0)), rfch=int(pk.get("rfch", 0)), data=data)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, BadJson):
                raise
            raise BadJson("bad rxpk entry: %s" % exc) from None
        if len(data) < 12:
            raise BadJson("rxpk data shorter than 12 bytes")
        for key in ("time", "tmms", "stat", "modu", "size"):
            if key in pk:
                meta.extra[key] = pk[key]
        return meta

    def to_rxpk(self) -> dict:
        pk = dict(self.extra)
        pk.update(tmst=self.tmst, chan=self.chan, rfch=self.rfch, freq=self.freq, stat=pk.get("stat", 1),
                  modu="LORA", datr=self.datr, codr=self.codr, rssi=self.rssi, lsnr=self.lsnr,
                  size=len(self.data), data=b64(self.data))
        return pk

    @property
    def sf(self):
        return datr_sf(self.datr)

    def summary(self) -> dict:
        """Metadata without the payload, for logs and bus records."""
        return dict(rssi=self.rssi, lsnr=self.lsnr, freq=self.freq, datr=self.datr, codr=self.codr,
                    tmst=self.tmst, chan=self.chan, rfch=self.rfch)


@dataclass
class TxRequest:
    freq: float
    datr: str
    data: bytes
    tmst: Optional[int] = None
    codr: str = "4/5"
    powe: int = 14
    rfch: int = 0
    ipol: bool = True
    # RX2 fallback parameters, kept server-side only
    rx2_freq: Optional[float] = None
    rx2_datr: Optional[str] = None
    rx2_tmst: Optional[int] = None

    @property
    def imme(self):
        return self.tmst is None

    def to_txpk(self) -> dict:
        pk = dict(imme=self.imme, freq=self.freq, rfch=self.rfch, powe=self.powe, modu="LORA",
                  datr=self.datr, codr=self.codr, ipol=self.ipol, size=len(self.data), data=b64(self.data))
        if self.tmst is not None:
            pk["tmst"] = self.tmst & 0xFFFFFFFF
        return pk

    @classmethod
    def from_txpk(cls, pk: dict) -> "TxRequest":
        try:
            data = unb64(pk["data"])
            tx = cls(freq=float(pk["freq"]), datr=pk["datr"], data=data,
                     tmst=None if pk.get("imme") else int(pk["tmst"]), codr=pk.get("codr", "4/5"),
                     powe=int(pk.get("powe", 14)), rfch=int(pk.get("rfch", 0)), ipol=bool(pk.get("ipol", True)))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, BadJson):
                raise
            raise BadJson("bad txpk: %s" % exc) from None
        datr_sf(tx.datr)
        if "size" in pk and int(pk["size"]) != len(data):
            raise BadJson("txpk size %s does not match data length %d" % (pk["size"], len(data)))
        return tx

    def to_record(self) -> dict:
        rec = self.to_txpk()
        rec.update(rx2_freq=self.rx2_freq, rx2_datr=self.rx2_datr, rx2_tmst=self.rx2_tmst)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "TxRequest":
        tx = cls.from_txpk(rec)
        tx.rx2_freq, tx.rx2_datr, tx.rx2_tmst = rec.get("rx2_freq"), rec.get("rx2_datr"), rec.get("rx2_tmst")
        return tx


def push_data(token, gateway_eui, rxpks=(), stat=None) -> ForwarderDatagram:
    doc = {"rxpk": [m.to_rxpk() if isinstance(m, RxMetadata) else m for m in rxpks]}
    if stat is not None:
        doc["stat"] = stat
    return ForwarderDatagram(Kind.PUSH_DATA, token, gateway_eui, doc)


def pull_resp(token, tx: TxRequest) -> ForwarderDatagram:
    return ForwarderDatagram(Kind.PULL_RESP, token, json={"txpk": tx.to_txpk()})


def tx_ack(token, gateway_eui, error="NONE") -> ForwarderDatagram:
    return ForwarderDatagram(Kind.TX_ACK, token, gateway_eui, {"txpk_ack": {"error": error}})
