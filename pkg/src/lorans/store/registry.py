"""Persistent registry of devices and gateways, backed by sqlite."""

from __future__ import annotations

import json
import sqlite3
import threading
import time
from typing import Iterable, Optional

from .models import DeviceRecord, DuplicateDevAddr, DuplicateEui, GatewayRecord, check_eui

_SCHEMA = """
CREATE TABLE IF NOT EXISTS devices (
    dev_eui TEXT PRIMARY KEY,
    dev_addr INTEGER,
    body TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS devices_dev_addr ON devices (dev_addr);
CREATE TABLE IF NOT EXISTS gateways (
    gateway_eui TEXT PRIMARY KEY,
    body TEXT NOT NULL
);
"""


class Registry:
    """Device and gateway records.

    Gateway rows are cached in memory because the connector consults them on
    every datagram; writes go through to sqlite.
    """

    def __init__(self, path: str = ":memory:"):
        self.path = path
        self._db = sqlite3.connect(path, check_same_thread=False, isolation_level=None)
        self._db.executescript(_SCHEMA)
        self._lock = threading.RLock()
        self._gateways = {}
        for (body,) in self._db.execute("SELECT body FROM gateways"):
            gw = GatewayRecord.from_dict(json.loads(body))
            self._gateways[gw.gateway_eui] = gw

    def close(self):
        with self._lock:
            self._db.close()

    # devices

    def add_device(self, rec: DeviceRecord) -> DeviceRecord:
        rec.check()
        with self._lock:
            if self.get_device(rec.dev_eui) is not None:
                raise DuplicateEui(rec.dev_eui.hex())
            if rec.dev_addr is not None and self._db.execute(
                    "SELECT 1 FROM devices WHERE dev_addr = ?", (rec.dev_addr,)).fetchone():
                raise DuplicateDevAddr("%08x" % rec.dev_addr)
            self._db.execute("INSERT INTO devices VALUES (?, ?, ?)",
                             (rec.dev_eui.hex(), rec.dev_addr, json.dumps(rec.to_dict(redact=False))))
        return rec

    def get_device(self, dev_eui: bytes) -> Optional[DeviceRecord]:
        with self._lock:
            row = self._db.execute("SELECT body FROM devices WHERE dev_eui = ?", (dev_eui.hex(),)).fetchone()
        return DeviceRecord.from_dict(json.loads(row[0])) if row else None

    def delete_device(self, dev_eui: bytes) -> bool:
        with self._lock:
            cur = self._db.execute("DELETE FROM devices WHERE dev_eui = ?", (dev_eui.hex(),))
            return cur.rowcount > 0

    def devices(self) -> list:
        with self._lock:
            rows = self._db.execute("SELECT body FROM devices ORDER BY dev_eui").fetchall()
        return [DeviceRecord.from_dict(json.loads(r[0])) for r in rows]

    # gateways

    def add_gateway(self, rec: GatewayRecord) -> GatewayRecord:
        check_eui(rec.gateway_eui, "gateway_eui")
        with self._lock:
            if rec.gateway_eui in self._gateways:
                raise DuplicateEui(rec.gateway_eui.hex())
            self._db.execute("INSERT INTO gateways VALUES (?, ?)",
                             (rec.gateway_eui.hex(), json.dumps(rec.to_dict())))
            self._gateways[rec.gateway_eui] = rec
        return rec

    def get_gateway(self, eui: bytes) -> Optional[GatewayRecord]:
        with self._lock:
            return self._gateways.get(eui)

    def is_registered(self, eui: bytes) -> bool:
        gw = self._gateways.get(eui)
        return gw is not None and gw.registered

    def delete_gateway(self, eui: bytes) -> bool:
        with self._lock:
            self._db.execute("DELETE FROM gateways WHERE gateway_eui = ?", (eui.hex(),))
            return self._gateways.pop(eui, None) is not None

    def gateways(self) -> list:
        with self._lock:
            return [self._gateways[k] for k in sorted(self._gateways)]

    def touch_gateway(self, eui: bytes, endpoint=None, now=None):
        """Record activity; ``endpoint`` is the (host, port) of a PullData."""
        now = time.time() if now is None else now
        with self._lock:
            gw = self._gateways.get(eui)
            if gw is None:
                return
            changed = endpoint is not None and tuple(endpoint) != gw.last_pull_endpoint
            if changed:
                gw.last_pull_endpoint = tuple(endpoint)
            if changed or gw.last_seen is None or now - gw.last_seen >= 1.0:
                gw.last_seen = now
                self._db.execute("UPDATE gateways SET body = ? WHERE gateway_eui = ?",
                                 (json.dumps(gw.to_dict()), eui.hex()))

    # fixtures

    def export_records(self) -> Iterable[dict]:
        for gw in self.gateways():
            yield dict(kind="gateway", **gw.to_dict())
        for dev in self.devices():
            yield dict(kind="device", **dev.to_dict(redact=False))
