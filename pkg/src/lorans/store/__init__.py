"""Two storage tiers: a persistent registry and a volatile session store.

:class:`Store` is the facade the server modules use. Registry operations are
explicit methods; everything else is forwarded to the volatile tier.
"""

from __future__ import annotations

import json
import time

from ..codec import SessionKeys
from .models import (Activation, AdrState, AppItem, CmdState, DedupResult, DeviceRecord, DeviceSession,
                     DownlinkPlan, DuplicateDevAddr, DuplicateEui, FCntRegression, GatewayRecord,
                     MacCommandQueueEntry, MissingKeyMaterial, NoSession, NotFound, StoreError, parse_hex)
from .registry import Registry
from .volatile import VolatileStore


class Store:
    def __init__(self, registry_path=":memory:", clock=time.time, dedup_ttl=10.0, frame_retention=24 * 3600.0):
        self.registry = Registry(registry_path)
        self.volatile = VolatileStore(clock=clock, dedup_ttl=dedup_ttl, frame_retention=frame_retention)
        self.clock = clock
        for dev in self.registry.devices():
            if dev.activation == Activation.ABP:
                self.volatile.session_put(self._abp_session(dev))

    def __getattr__(self, name):
        return getattr(self.volatile, name)

    @staticmethod
    def _abp_session(dev: DeviceRecord) -> DeviceSession:
        return DeviceSession(dev_addr=dev.dev_addr, dev_eui=dev.dev_eui, keys=SessionKeys(dev.nwk_skey, dev.app_skey),
                             activation=Activation.ABP)

    def register_device(self, rec: DeviceRecord) -> DeviceRecord:
        rec.check()
        if rec.activation == Activation.ABP:
            try:
                live = self.volatile.session_get(rec.dev_addr)
            except NotFound:
                live = None
            if live is not None:
                raise DuplicateDevAddr("%08x is in use" % rec.dev_addr)
        self.registry.add_device(rec)
        if rec.activation == Activation.ABP:
            self.volatile.session_put(self._abp_session(rec))
        return rec

    def register_gateway(self, rec: GatewayRecord) -> GatewayRecord:
        return self.registry.add_gateway(rec)

    def delete_device(self, dev_eui: bytes) -> bool:
        self.volatile.session_delete(dev_eui)
        return self.registry.delete_device(dev_eui)

    def delete_gateway(self, eui: bytes) -> bool:
        return self.registry.delete_gateway(eui)

    def load_records(self, lines):
        """Import line-delimited JSON records; returns (loaded, errors)."""
        loaded, errors = 0, []
        for n, line in enumerate(lines, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                doc = json.loads(line)
                kind = doc.pop("kind", "device")
                if kind == "gateway":
                    self.register_gateway(GatewayRecord.from_dict(doc))
                elif kind == "device":
                    self.register_device(DeviceRecord.from_dict(doc))
                else:
                    raise ValueError("unknown record kind %r" % kind)
                loaded += 1
            except (StoreError, ValueError, KeyError) as exc:
                errors.append("line %d: %s" % (n, exc))
        return loaded, errors

    def dump_records(self):
        for rec in self.registry.export_records():
            yield json.dumps(rec, sort_keys=True)
