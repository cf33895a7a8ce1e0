"""Minimal application server: records decrypted uplinks, injects downlinks."""

from __future__ import annotations

import threading
import time
from collections import deque

from . import udp
from .metrics import Metrics
from .worker import Worker


class AppServerStub(Worker):
    group = "appserver"
    topics = ("appserver.in",)

    def __init__(self, bus, metrics=None, name="appserver", clock=time.time, keep=256):
        super().__init__(bus, name, clock)
        self.metrics = metrics or Metrics(name)
        self._lock = threading.Lock()
        self._uplinks = {}
        self._seen = {}
        self.keep = keep

    def handle(self, msg):
        rec = msg.record()
        dev = rec["dev_eui"]
        with self._lock:
            seen = self._seen.setdefault(dev, deque(maxlen=64))
            # at-least-once delivery: a redelivered uplink is recorded once
            if rec["fcnt"] in seen:
                self.metrics.inc("redelivered")
            else:
                seen.append(rec["fcnt"])
                self._uplinks.setdefault(dev, deque(maxlen=self.keep)).append(
                    dict(fcnt=rec["fcnt"], fport=rec["fport"], payload=rec["payload"], received_at=self.clock()))
                self.metrics.inc("uplinks")
        self.consumer.ack(msg)

    def uplinks(self, dev_eui: str):
        with self._lock:
            return list(self._uplinks.get(dev_eui.lower(), ()))

    def total(self) -> int:
        with self._lock:
            return sum(len(v) for v in self._uplinks.values())

    def send_downlink(self, dev_eui: str, fport: int, payload: bytes, confirmed=False):
        """Queue a downlink through the bus (``appserver.out``)."""
        self.bus.publish_record("appserver.out", bytes.fromhex(dev_eui), "app-downlink", dict(
            dev_eui=dev_eui.lower(), fport=fport, payload=udp.b64(payload), confirmed=confirmed))
