"""Records kept by the registry (persistent) and session (volatile) tiers."""

from __future__ import annotations

import enum
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from ..codec import MacCommand, SessionKeys

ADR_HISTORY = 20


class StoreError(Exception):
    pass


class DuplicateEui(StoreError):
    pass


class DuplicateDevAddr(StoreError):
    pass


class MissingKeyMaterial(StoreError):
    pass


class NotFound(StoreError):
    pass


class NoSession(NotFound):
    pass


class FCntRegression(StoreError):
    pass


class Activation(str, enum.Enum):
    OTAA = "OTAA"
    ABP = "ABP"


def check_eui(eui: bytes, what="EUI"):
    if not isinstance(eui, (bytes, bytearray)) or len(eui) != 8:
        raise ValueError("%s must be 8 bytes" % what)


def parse_hex(text: str, size: int, what: str) -> bytes:
    try:
        raw = bytes.fromhex(text.replace(":", "").replace("-", ""))
    except (ValueError, AttributeError):
        raise ValueError("%s is not hex: %r" % (what, text)) from None
    if len(raw) != size:
        raise ValueError("%s must be %d bytes, got %d" % (what, size, len(raw)))
    return raw


@dataclass
class DeviceRecord:
    dev_eui: bytes
    app_eui: bytes
    activation: Activation
    app_key: Optional[bytes] = None
    dev_addr: Optional[int] = None
    nwk_skey: Optional[bytes] = None
    app_skey: Optional[bytes] = None
    description: str = ""
    created_at: float = field(default_factory=time.time)

    def check(self):
        check_eui(self.dev_eui, "dev_eui")
        check_eui(self.app_eui, "app_eui")
        if self.activation == Activation.OTAA:
            if not self.app_key or len(self.app_key) != 16:
                raise MissingKeyMaterial("OTAA device needs a 16-byte app_key")
        else:
            if self.dev_addr is None or not self.nwk_skey or not self.app_skey:
                raise MissingKeyMaterial("ABP device needs dev_addr, nwk_skey and app_skey")
            if len(self.nwk_skey) != 16 or len(self.app_skey) != 16:
                raise MissingKeyMaterial("session keys are 16 bytes")

    @property
    def fixed_session(self):
        if self.activation != Activation.ABP:
            return None
        return self.dev_addr, SessionKeys(self.nwk_skey, self.app_skey)

    def to_dict(self, redact=True) -> dict:
        d = dict(dev_eui=self.dev_eui.hex(), app_eui=self.app_eui.hex(), activation=self.activation.value,
                 description=self.description, created_at=self.created_at)
        if self.dev_addr is not None:
            d["dev_addr"] = "%08x" % self.dev_addr
        for name in ("app_key", "nwk_skey", "app_skey"):
            value = getattr(self, name)
            if value is not None:
                d[name] = "<redacted>" if redact else value.hex()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceRecord":
        act = Activation(str(d.get("activation", "OTAA")).upper())
        def key(name):
            return parse_hex(d[name], 16, name) if d.get(name) else None
        rec = cls(
            dev_eui=parse_hex(d["dev_eui"], 8, "dev_eui"),
            app_eui=parse_hex(d.get("app_eui", "00" * 8), 8, "app_eui"),
            activation=act,
            app_key=key("app_key"),
            dev_addr=int(d["dev_addr"], 16) if d.get("dev_addr") else None,
            nwk_skey=key("nwk_skey"),
            app_skey=key("app_skey"),
            description=d.get("description", ""),
        )
        if "created_at" in d:
            rec.created_at = float(d["created_at"])
        return rec


@dataclass
class GatewayRecord:
    gateway_eui: bytes
    description: str = ""
    lat: Optional[float] = None
    lon: Optional[float] = None
    registered: bool = True
    last_seen: Optional[float] = None
    last_pull_endpoint: Optional[tuple] = None

    def to_dict(self) -> dict:
        return dict(gateway_eui=self.gateway_eui.hex(), description=self.description, lat=self.lat, lon=self.lon,
                    registered=self.registered, last_seen=self.last_seen,
                    last_pull_endpoint=list(self.last_pull_endpoint) if self.last_pull_endpoint else None)

    @classmethod
    def from_dict(cls, d: dict) -> "GatewayRecord":
        ep = d.get("last_pull_endpoint")
        return cls(gateway_eui=parse_hex(d["gateway_eui"], 8, "gateway_eui"), description=d.get("description", ""),
                   lat=d.get("lat"), lon=d.get("lon"), registered=bool(d.get("registered", True)),
                   last_seen=d.get("last_seen"), last_pull_endpoint=tuple(ep) if ep else None)


@dataclass
class AdrState:
    snr_history: deque = field(default_factory=lambda: deque(maxlen=ADR_HISTORY))
    current_dr: int = 0
    current_txpow_index: int = 0
    adr_enabled: bool = False

    def copy(self) -> "AdrState":
        return AdrState(deque(self.snr_history, maxlen=self.snr_history.maxlen), self.current_dr,
                        self.current_txpow_index, self.adr_enabled)

    def max_snr(self):
        return max(snr for snr, _ in self.snr_history)


@dataclass
class DeviceSession:
    dev_addr: int
    dev_eui: bytes
    keys: SessionKeys
    fcnt_up: int = 0    # next expected uplink counter
    fcnt_down: int = 0  # next downlink counter
    adr: AdrState = field(default_factory=AdrState)
    last_uplink_meta: Optional[dict] = None
    rx1_dr_offset: int = 0
    rx2_dr: int = 0
    rx_delay: int = 1
    activation: Activation = Activation.OTAA
    created_at: float = field(default_factory=time.time)
    uplinks: int = 0

    def copy(self) -> "DeviceSession":
        s = DeviceSession(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        s.adr = self.adr.copy()
        s.last_uplink_meta = dict(self.last_uplink_meta) if self.last_uplink_meta else None
        return s

    def snapshot(self) -> dict:
        return dict(dev_addr="%08x" % self.dev_addr, dev_eui=self.dev_eui.hex(), fcnt_up=self.fcnt_up,
                    fcnt_down=self.fcnt_down, activation=self.activation.value, uplinks=self.uplinks,
                    adr=dict(enabled=self.adr.adr_enabled, dr=self.adr.current_dr,
                             txpow_index=self.adr.current_txpow_index, history=list(self.adr.snr_history)),
                    rx1_dr_offset=self.rx1_dr_offset, rx2_dr=self.rx2_dr, rx_delay=self.rx_delay,
                    last_uplink_meta=self.last_uplink_meta, created_at=self.created_at,
                    nwk_skey="<redacted>", app_skey="<redacted>")


class DedupResult(enum.Enum):
    FIRST_COPY = "first"
    DUPLICATE_COPY = "duplicate"


@dataclass
class DedupEntry:
    key: tuple
    first_seen: float
    receptions: list
    ttl: float
    completed: bool = False
    downlink_sent: bool = False

    def expired(self, now):
        return now - self.first_seen >= self.ttl


@dataclass
class AppItem:
    fport: int
    payload: bytes
    confirmed: bool = False


class CmdState(str, enum.Enum):
    PENDING = "Pending"
    SENT = "Sent"


@dataclass
class MacCommandQueueEntry:
    cmd: MacCommand
    state: CmdState = CmdState.PENDING
    attempts: int = 0
    created_at: float = field(default_factory=time.time)
    sent_after_fcnt: Optional[int] = None


@dataclass
class DownlinkPlan:
    app: Optional[AppItem] = None
    mac_commands: list = field(default_factory=list)
    mac_as_payload: bool = False
    fpending: bool = False

    @property
    def empty(self):
        return self.app is None and not self.mac_commands
