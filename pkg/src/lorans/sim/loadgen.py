"""Virtual device fleet and the load-test harness.

A :class:`Fleet` owns the virtual gateways and nodes and keeps one
:class:`UplinkRecord` per uplink. :func:`run_scenario` drives a fleet on the
wall clock with every node sending once per period, evenly phased, and
summarises a measurement window as a :class:`LoadReport`.
"""

from __future__ import annotations

import asyncio
import heapq
import json
import logging
import math
import random
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

from ..admin import AdminClient
from ..codec import MType, SessionKeys
from .gateway import RadioModel, VirtualGateway
from .node import VirtualNode, next_due, node_step

log = logging.getLogger(__name__)

DEFAULT_PERIOD = 40.0
DEFAULT_TIMEOUT = 5.0


class ServerUnreachable(Exception):
    pass


class RegistrationFailed(Exception):
    pass


@dataclass
class ScenarioConfig:
    nodes: int = 10
    gateways: int = 1
    fan_in: int = 1               # gateways hearing each node
    period: float = DEFAULT_PERIOD
    timeout: float = DEFAULT_TIMEOUT
    duration: float = 60.0        # how long nodes keep sending
    warmup: float = 0.0           # start of the measurement window
    confirmed: bool = True
    payload_size: int = 10
    adr: bool = False
    otaa: bool = False
    seed: int = 0
    server: tuple = ("127.0.0.1", 1700)
    admin_url: Optional[str] = None
    admin_token: Optional[str] = None
    register: bool = True
    demod_limit: Optional[int] = 8
    net_id: int = 0x000013
    start_delay: float = 0.5
    report: Optional[str] = None


@dataclass
class UplinkRecord:
    node: int
    fcnt: int
    sent_at: float
    confirmed: bool
    response_at: Optional[float] = None
    gateway: Optional[str] = None

    @property
    def latency(self):
        return None if self.response_at is None else self.response_at - self.sent_at


@dataclass
class LoadReport:
    nodes: int
    gateways: int
    period: float
    timeout: float
    confirmed: bool
    window: float
    offered_rate: float
    achieved_throughput: float
    sent: int
    succeeded: int
    timed_out: int
    pending: int
    late: int
    failure_count: int
    median_response_ms: float
    p95_response_ms: float
    joins_sent: int = 0
    joins_ok: int = 0
    demod_drops: int = 0
    cpu: dict = field(default_factory=dict)
    elapsed: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("median_response_ms", "p95_response_ms"):
            if not math.isfinite(d[k]):
                d[k] = None  # no uplinks, or more than half (or 5%) were never answered
        return d


def node_identity(i: int, seed: int = 0, net_id: int = 0x000013, otaa=False):
    """Deterministic EUI and key material for fleet member ``i``."""
    rng = random.Random("node:%d:%d" % (seed, i))
    dev_eui = bytes([0x70, 0xB3, 0xD5, 0x7E, seed & 0xFF]) + i.to_bytes(3, "big")
    if otaa:
        return dict(dev_eui=dev_eui, app_key=rng.randbytes(16))
    dev_addr = ((net_id & 0x7F) << 25) | (1 << 24) | i
    return dict(dev_eui=dev_eui, dev_addr=dev_addr, keys=SessionKeys(rng.randbytes(16), rng.randbytes(16)))


def gateway_eui(i: int, seed: int = 0) -> bytes:
    return bytes([0xAA, 0x55, 0x5A, seed & 0xFF]) + i.to_bytes(4, "big")


def fixture_lines(nodes, gateways) -> list:
    lines = [json.dumps(dict(kind="gateway", gateway_eui=g.hex())) for g in gateways]
    for n in nodes:
        if n.otaa:
            doc = dict(kind="device", dev_eui=n.dev_eui.hex(), app_eui=n.app_eui.hex(), activation="OTAA",
                       app_key=n.app_key.hex())
        else:
            doc = dict(kind="device", dev_eui=n.dev_eui.hex(), app_eui=n.app_eui.hex(), activation="ABP",
                       dev_addr="%08x" % n.dev_addr, nwk_skey=n.keys.nwk_skey.hex(), app_skey=n.keys.app_skey.hex())
        lines.append(json.dumps(doc))
    return lines


class Fleet:
    """Nodes and gateways sharing one event loop; all traffic goes over UDP."""

    def __init__(self, server=("127.0.0.1", 1700), radio: Optional[RadioModel] = None, demod_limit=8,
                 clock=time.monotonic):
        self.server = server
        self.radio = radio or RadioModel()
        self.demod_limit = demod_limit
        self.clock = clock
        self.gateways: list = []
        self.nodes: list = []
        self.attach: list = []
        self.records: dict = {}
        self.joins: dict = {}
        self.join_attempts = 0
        self.downlinks: list = []
        self._waiters: dict = {}
        self.on_join = None

    def add_gateway(self, eui: bytes) -> VirtualGateway:
        gw = VirtualGateway(eui, self.server, self.radio, self.demod_limit, on_downlink=self._on_downlink)
        self.gateways.append(gw)
        return gw

    def add_node(self, node: VirtualNode, gateways=(0,)) -> int:
        self.nodes.append(node)
        self.attach.append(list(gateways))
        return len(self.nodes) - 1

    async def start(self, timeout=5.0):
        for gw in self.gateways:
            await gw.start()
        try:
            await asyncio.wait_for(asyncio.gather(*(gw.connected.wait() for gw in self.gateways)), timeout)
        except asyncio.TimeoutError:
            self.close()
            raise ServerUnreachable("no PULL_ACK from %s:%d within %.0f s" % (*self.server, timeout)) from None
        return self

    def close(self):
        for gw in self.gateways:
            gw.close()

    # traffic

    def transmit(self, key: int, kind: str, raw: bytes, radios=None):
        """Put one frame on the air; every attached gateway may hear it."""
        node = self.nodes[key]
        now = self.clock()
        if kind == "join":
            self.join_attempts += 1
            tag = (key, "join")
        else:
            fcnt = node.fcnt_up - 1
            tag = (key, fcnt)
            self.records[tag] = UplinkRecord(key, fcnt, now, raw[0] >> 5 == MType.CONFIRMED_DATA_UP)
        for j, gi in enumerate(self.attach[key]):
            radio = radios[j] if radios is not None else None
            self.gateways[gi].receive(tag, node.dev_eui, raw, node.datr, radio=radio)
        return tag

    def _on_downlink(self, candidates, tx, gateway_eui, now):
        is_accept = tx.data[0] >> 5 == MType.JOIN_ACCEPT
        for tag in candidates:
            key, what = tag
            node = self.nodes[key]
            if is_accept:
                if what != "join" or not node.handle_join_accept(tx.data):
                    continue
                self.joins[key] = now
                self.downlinks.append((key, gateway_eui, now, "join-accept"))
                self._wake(tag)
                if self.on_join is not None:
                    self.on_join(key)
                return
            if what == "join":
                continue
            dl = node.handle_downlink(tx.data)
            if dl is None:
                continue
            rec = self.records.get(tag)
            if rec is not None and rec.response_at is None:
                rec.response_at = now
                rec.gateway = gateway_eui.hex()
            self.downlinks.append((key, gateway_eui, now, dl))
            self._wake(tag)
            return

    def _wake(self, tag):
        fut = self._waiters.pop(tag, None)
        if fut is not None and not fut.done():
            fut.set_result(True)

    async def _await(self, tag, timeout):
        fut = asyncio.get_running_loop().create_future()
        self._waiters[tag] = fut
        try:
            await asyncio.wait_for(fut, timeout)
            return True
        except asyncio.TimeoutError:
            self._waiters.pop(tag, None)
            return False

    async def join(self, key: int, timeout=7.0, raw: Optional[bytes] = None) -> bool:
        """Send a join request (or replay ``raw``) and wait for the accept."""
        node = self.nodes[key]
        tag = self.transmit(key, "join", raw if raw is not None else node.join_request())
        return await self._await(tag, timeout)

    async def uplink(self, key: int, timeout=5.0, radios=None, wait=None, **kw) -> UplinkRecord:
        """Send one uplink and wait for its downlink.

        By default only confirmed uplinks wait; pass ``wait=True`` when a
        queued downlink is expected after an unconfirmed one.
        """
        node = self.nodes[key]
        tag = self.transmit(key, "uplink", node.uplink(**kw), radios)
        if self.records[tag].confirmed if wait is None else wait:
            await self._await(tag, timeout)
        return self.records[tag]


def _percentile(values, q):
    if not values:
        return math.nan
    vals = sorted(values)
    idx = q * (len(vals) - 1)
    lo = math.floor(idx)
    hi = min(lo + 1, len(vals) - 1)
    return vals[lo] + (vals[hi] - vals[lo]) * (idx - lo)


def summarize(fleet: Fleet, cfg: ScenarioConfig, t_start: float, report_time: float, cpu=None) -> LoadReport:
    """Collapse the uplink records into a report over the measurement window."""
    w0, w1 = t_start + cfg.warmup, t_start + cfg.duration
    window = max(w1 - w0, 1e-9)
    in_window = [r for r in fleet.records.values() if w0 <= r.sent_at < w1 and r.confirmed]
    succeeded = timed_out = pending = late = 0
    latencies = []
    for r in in_window:
        lat = r.latency
        if lat is not None and lat <= cfg.timeout:
            succeeded += 1
        elif lat is not None:
            late += 1
            timed_out += 1
        elif report_time - r.sent_at > cfg.timeout:
            timed_out += 1
        else:
            pending += 1
        latencies.append(lat if lat is not None else math.inf)
    answered = sum(1 for r in fleet.records.values() if r.response_at is not None and w0 <= r.response_at < w1)
    median = statistics.median(latencies) * 1000 if latencies else math.nan
    p95 = _percentile(latencies, 0.95) * 1000 if latencies else math.nan
    sent = len(in_window)
    return LoadReport(
        nodes=len(fleet.nodes), gateways=len(fleet.gateways), period=cfg.period, timeout=cfg.timeout,
        confirmed=cfg.confirmed, window=round(window, 3), offered_rate=len(fleet.nodes) / cfg.period,
        achieved_throughput=answered / window, sent=sent, succeeded=succeeded, timed_out=timed_out,
        pending=pending, late=late, failure_count=sent - succeeded, median_response_ms=median,
        p95_response_ms=p95, joins_sent=fleet.join_attempts, joins_ok=len(fleet.joins),
        demod_drops=sum(g.stats["demod_drops"] for g in fleet.gateways), cpu=cpu or {},
        elapsed=round(report_time - t_start, 3))


def _busy(stats: dict) -> dict:
    return {name: m.get("busy_seconds", 0.0) for name, m in stats.get("modules", {}).items()}


async def run_scenario(cfg: ScenarioConfig) -> LoadReport:
    """Run one load scenario against a live server and return its report."""
    loop = asyncio.get_running_loop()
    fleet = Fleet(tuple(cfg.server), RadioModel(cfg.seed), cfg.demod_limit)
    g_euis = [gateway_eui(i, cfg.seed) for i in range(cfg.gateways)]
    for eui in g_euis:
        fleet.add_gateway(eui)
    fan_in = max(1, min(cfg.fan_in, cfg.gateways))
    for i in range(cfg.nodes):
        ident = node_identity(i, cfg.seed, cfg.net_id, cfg.otaa)
        node = VirtualNode(**ident, period=cfg.period, confirmed=cfg.confirmed, payload_size=cfg.payload_size,
                           adr=cfg.adr, seed=cfg.seed)
        fleet.add_node(node, [(i + j) % cfg.gateways for j in range(fan_in)])

    client = AdminClient(cfg.admin_url, cfg.admin_token) if cfg.admin_url else None
    if client is not None and cfg.register:
        text = "\n".join(fixture_lines(fleet.nodes, g_euis))
        try:
            status, doc = await loop.run_in_executor(None, client.load_fixtures, text)
        except OSError as exc:
            raise ServerUnreachable("admin API at %s: %s" % (cfg.admin_url, exc)) from None
        if status != 200 or doc.get("errors"):
            errors = doc.get("errors") if isinstance(doc, dict) else doc
            raise RegistrationFailed("fixture load returned %s: %s" % (status, (errors or [])[:5]))

    if cfg.nodes == 0:
        return summarize(fleet, cfg, fleet.clock(), fleet.clock())
    await fleet.start()
    t_start = fleet.clock() + cfg.start_delay
    heap = []
    scheduled = {}

    def schedule(key):
        scheduled[key] = due = next_due(fleet.nodes[key])
        heapq.heappush(heap, (due, key))

    for key, node in enumerate(fleet.nodes):
        node.next_uplink = t_start + key * cfg.period / cfg.nodes
        if node.otaa:
            node.join_sent_at = node.next_uplink - 10.0
        schedule(key)
    # a join accept moves the node from join retries to its uplink slot
    fleet.on_join = schedule

    cpu_before = None
    end = t_start + cfg.duration
    while heap:
        due, key = heap[0]
        if due >= end:
            break
        now = fleet.clock()
        if cpu_before is None and client is not None and now >= t_start + cfg.warmup:
            cpu_before = (now, _busy((await loop.run_in_executor(None, client.stats))[1]))
            continue
        if due > now:
            await asyncio.sleep(min(due - now, 0.05))
            continue
        heapq.heappop(heap)
        if scheduled.get(key) != due:
            continue
        step = node_step(fleet.nodes[key], now)
        if step is not None:
            fleet.transmit(key, *step)
        schedule(key)
    await asyncio.sleep(max(0.0, end - fleet.clock()))
    cpu = {}
    if client is not None:
        now = fleet.clock()
        after = _busy((await loop.run_in_executor(None, client.stats))[1])
        if cpu_before is not None:
            t0, before = cpu_before
            cpu = {k: round((after[k] - before.get(k, 0.0)) / max(now - t0, 1e-9), 4) for k in after}
    await asyncio.sleep(cfg.timeout)
    report = summarize(fleet, cfg, t_start, fleet.clock(), cpu)
    fleet.close()
    if cfg.report:
        write_report(cfg.report, fleet, report, t_start)
    return report


def write_report(path, fleet: Fleet, report: LoadReport, t_start: float):
    """NDJSON: one row per uplink, then the summary."""
    with open(path, "w") as fh:
        for r in sorted(fleet.records.values(), key=lambda r: r.sent_at):
            lat = r.latency
            fh.write(json.dumps(dict(type="uplink", node=fleet.nodes[r.node].dev_eui.hex(), fcnt=r.fcnt,
                                     sent_at=round(r.sent_at - t_start, 4), confirmed=r.confirmed,
                                     response_ms=None if lat is None else round(lat * 1000, 3),
                                     gateway=r.gateway)) + "\n")
        fh.write(json.dumps(dict(type="summary", **report.to_dict())) + "\n")
