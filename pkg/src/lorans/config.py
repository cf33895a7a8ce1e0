"""Server configuration.

A config file (YAML or JSON) mirrors the nested dataclasses below; missing
keys keep their defaults::

    net_id: 0x000013
    connector: {host: 0.0.0.0, port: 1700}
    central: {instances: 2, dedup_window: 0.2}
    controller: {installation_margin: 10}
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

import yaml

from . import band


@dataclass
class ConnectorConfig:
    host: str = "0.0.0.0"
    port: int = 1700


@dataclass
class CentralConfig:
    instances: int = 1
    rx1_delay: float = 1.0
    rx2_delay: float = 2.0
    rx2_freq: float = band.RX2_FREQ
    downlink_power: int = 20
    dedup_window: float = 0.2
    dedup_ttl: float = 10.0
    fcnt_window: int = 16384
    # emulated per-uplink compute budget in milliseconds; 0 in production
    work_ms: float = 0.0


@dataclass
class JoinConfig:
    instances: int = 1
    join_accept_delay1: float = 5.0
    join_accept_delay2: float = 6.0
    rx1_dr_offset: int = 0
    rx2_dr: int = band.RX2_DR
    rx_delay: int = 1


@dataclass
class ControllerConfig:
    instances: int = 1
    installation_margin: float = 10.0
    history_size: int = 20
    min_samples: int = 1
    max_attempts: int = 3
    demod_floor: dict = field(default_factory=lambda: dict(band.DEMOD_FLOOR))
    dr_max: int = band.DR_MAX
    txpow_max_index: int = band.TX_POWER_MAX_INDEX
    ch_mask: int = 0x0007


@dataclass
class AdminConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    token: Optional[str] = None
    enabled: bool = True


@dataclass
class ServerConfig:
    net_id: int = 0x000013
    registry_path: str = ":memory:"
    bus_capacity: int = 65536
    frame_retention: float = 24 * 3600.0
    fixtures: Optional[str] = None
    connector: ConnectorConfig = field(default_factory=ConnectorConfig)
    central: CentralConfig = field(default_factory=CentralConfig)
    join: JoinConfig = field(default_factory=JoinConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    admin: AdminConfig = field(default_factory=AdminConfig)

    @property
    def nwk_id(self):
        return self.net_id & 0x7F

    def to_dict(self):
        return dataclasses.asdict(self)


def _merge(obj, data: dict):
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        if key not in names:
            raise ValueError("unknown config key %r for %s" % (key, type(obj).__name__))
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            _merge(current, value)
        elif key == "demod_floor":
            setattr(obj, key, {int(k): float(v) for k, v in value.items()})
        else:
            setattr(obj, key, value)
    return obj


def from_dict(data: dict) -> ServerConfig:
    return _merge(ServerConfig(), data or {})


def load_config(path: Optional[str]) -> ServerConfig:
    if not path:
        return ServerConfig()
    with open(path) as fh:
        text = fh.read()
    data = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    return from_dict(data or {})
