"""Assembles the network server from its modules.

All modules share one in-process bus and one store. ``central.instances``
(and the equivalent knobs of the other modules) set how many workers join
each consumer group.
"""

from __future__ import annotations

import logging
import time

from .appserver import AppServerStub
from .bus import InProcessBus
from .central import CentralServer
from .config import ServerConfig
from .connector import Connector
from .controller import NetworkController
from .joinserver import JoinServer
from .store import Store

log = logging.getLogger(__name__)


class NetworkServer:
    def __init__(self, cfg: ServerConfig = None, clock=time.time):
        self.cfg = cfg = cfg or ServerConfig()
        self.clock = clock
        self.bus = InProcessBus(capacity=cfg.bus_capacity, clock=clock)
        self.store = Store(cfg.registry_path, clock=clock, dedup_ttl=cfg.central.dedup_ttl,
                           frame_retention=cfg.frame_retention)
        if cfg.fixtures:
            with open(cfg.fixtures) as fh:
                loaded, errors = self.store.load_records(fh)
            log.info("fixtures: %d loaded, %d rejected", loaded, len(errors))
            for err in errors:
                log.warning("fixtures: %s", err)
        self.connector = Connector(self.bus, self.store, cfg.connector.host, cfg.connector.port, clock=clock)
        self.centrals = [CentralServer(self.bus, self.store, cfg.central, name="central-%d" % i, clock=clock)
                         for i in range(cfg.central.instances)]
        self.joins = [JoinServer(self.bus, self.store, cfg.join, net_id=cfg.net_id, name="join-%d" % i,
                                 clock=clock, downlink_power=cfg.central.downlink_power,
                                 rx2_freq=cfg.central.rx2_freq)
                      for i in range(cfg.join.instances)]
        self.controllers = [NetworkController(self.bus, self.store, cfg.controller, name="controller-%d" % i,
                                              clock=clock)
                            for i in range(cfg.controller.instances)]
        self.appserver = AppServerStub(self.bus, clock=clock)
        self.admin = None
        self.started_at = None

    @property
    def workers(self):
        return [*self.centrals, *self.joins, *self.controllers, self.appserver]

    def subscribe(self):
        """Join every worker to its group without starting threads (for synchronous tests)."""
        for w in self.workers:
            w.subscribe()
        return self

    def start(self, admin=None):
        for w in self.workers:
            w.start()
        self.connector.start()
        admin_cfg = self.cfg.admin
        if admin if admin is not None else admin_cfg.enabled:
            from .admin import AdminServer
            self.admin = AdminServer(self, admin_cfg.host, admin_cfg.port, admin_cfg.token).start()
        self.started_at = time.monotonic()
        log.info("listening on udp %s:%d", self.cfg.connector.host, self.connector.port)
        return self

    def stop(self):
        if self.admin is not None:
            self.admin.stop()
        self.connector.stop()
        for w in self.workers:
            w.stop()

    def drain(self, rounds=20):
        """Process queued work on every worker until nothing moves (synchronous mode)."""
        for _ in range(rounds):
            if not sum(w.drain() for w in self.workers):
                break

    def stats(self) -> dict:
        modules = {"connector": dict(self.connector.metrics.snapshot(),
                                     busy_seconds=round(self.connector.busy_seconds, 4))}
        for w in self.workers:
            modules[w.name] = dict(w.metrics.snapshot(), **w.stats())
        uptime = time.monotonic() - self.started_at if self.started_at else 0.0
        return dict(uptime=round(uptime, 3), devices=len(self.store.registry.devices()),
                    gateways=len(self.store.registry.gateways()), sessions=len(self.store.sessions()),
                    modules=modules)
