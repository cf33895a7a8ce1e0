"""Volatile tier: sessions, dedup entries, downlink queues, frame log."""

from __future__ import annotations

import random
import threading
import time
from collections import deque

from ..codec import mac as maccmd
from .models import (CmdState, DedupEntry, DedupResult, DeviceSession, DownlinkPlan,
                     DuplicateDevAddr, FCntRegression, MacCommandQueueEntry, NoSession, NotFound)

MAX_FOPTS = 15
NONCE_HISTORY = 64
FRAME_LOG = 200
DAY = 24 * 3600.0


class VolatileStore:
    def __init__(self, clock=time.time, dedup_ttl=10.0, frame_retention=DAY, nonce_history=NONCE_HISTORY):
        self.clock = clock
        self.dedup_ttl = dedup_ttl
        self.frame_retention = frame_retention
        self.nonce_history = nonce_history
        self._lock = threading.RLock()
        self._sessions = {}
        self._by_eui = {}
        self._nonces = {}
        self._dedup = {}
        self._dedup_order = deque()
        self._app_q = {}
        self._mac_q = {}
        self._frames = {}

    # sessions

    def session_get(self, dev_addr: int) -> DeviceSession:
        with self._lock:
            s = self._sessions.get(dev_addr)
            if s is None:
                raise NotFound("no session for %08x" % dev_addr)
            return s.copy()

    def session_by_eui(self, dev_eui: bytes) -> DeviceSession:
        with self._lock:
            addr = self._by_eui.get(dev_eui)
            if addr is None:
                raise NotFound("no session for %s" % dev_eui.hex())
            return self._sessions[addr].copy()

    def session_put(self, session: DeviceSession):
        """Store an updated session; counters may not move backwards."""
        with self._lock:
            old = self._sessions.get(session.dev_addr)
            if old is not None and old.dev_eui == session.dev_eui and old.keys == session.keys:
                if session.fcnt_up < old.fcnt_up or session.fcnt_down < old.fcnt_down:
                    raise FCntRegression("%08x counters would move backwards" % session.dev_addr)
            elif old is not None:
                raise DuplicateDevAddr("%08x belongs to another live session" % session.dev_addr)
            self._sessions[session.dev_addr] = session.copy()
            self._by_eui[session.dev_eui] = session.dev_addr

    def session_replace(self, session: DeviceSession):
        """Install a fresh session for a (re)joined device, dropping its old one atomically."""
        with self._lock:
            other = self._sessions.get(session.dev_addr)
            if other is not None and other.dev_eui != session.dev_eui:
                raise DuplicateDevAddr("%08x belongs to another live session" % session.dev_addr)
            old_addr = self._by_eui.get(session.dev_eui)
            if old_addr is not None and old_addr != session.dev_addr:
                self._sessions.pop(old_addr, None)
                self._app_q.pop(old_addr, None)
                self._mac_q.pop(old_addr, None)
            self._sessions[session.dev_addr] = session.copy()
            self._by_eui[session.dev_eui] = session.dev_addr
            self._mac_q.pop(session.dev_addr, None)

    def session_update(self, dev_addr: int, fn):
        """Run ``fn(session)`` on the live session under the store lock; returns fn's result."""
        with self._lock:
            s = self._sessions.get(dev_addr)
            if s is None:
                raise NoSession("no session for %08x" % dev_addr)
            return fn(s)

    def session_delete(self, dev_eui: bytes):
        with self._lock:
            addr = self._by_eui.pop(dev_eui, None)
            if addr is not None:
                self._sessions.pop(addr, None)
                self._app_q.pop(addr, None)
                self._mac_q.pop(addr, None)

    def sessions(self):
        with self._lock:
            return [s.copy() for s in self._sessions.values()]

    def allocate_dev_addr(self, nwk_id: int, rng=None, reserved=()) -> int:
        rng = rng or random.SystemRandom()
        with self._lock:
            while True:
                addr = ((nwk_id & 0x7F) << 25) | rng.getrandbits(25)
                if addr not in self._sessions and addr not in reserved:
                    return addr

    def check_insert_nonce(self, dev_eui: bytes, nonce: int) -> bool:
        """True if ``nonce`` is fresh for the device (and remember it)."""
        with self._lock:
            hist = self._nonces.get(dev_eui)
            if hist is None:
                hist = self._nonces[dev_eui] = deque(maxlen=self.nonce_history)
            if nonce in hist:
                return False
            hist.append(nonce)
            return True

    def nonce_history_of(self, dev_eui: bytes):
        with self._lock:
            return list(self._nonces.get(dev_eui, ()))

    # dedup

    def _expire_dedup(self, now):
        while self._dedup_order:
            key = self._dedup_order[0]
            entry = self._dedup.get(key)
            if entry is not None and not entry.expired(now):
                break
            self._dedup_order.popleft()
            if entry is not None and entry.expired(now):
                del self._dedup[key]

    def dedup_check_insert(self, key, gateway_eui: bytes, meta: dict, ttl=None) -> DedupResult:
        now = self.clock()
        with self._lock:
            self._expire_dedup(now)
            entry = self._dedup.get(key)
            if entry is None or entry.expired(now):
                self._dedup[key] = DedupEntry(key, now, [(gateway_eui, meta)], self.dedup_ttl if ttl is None else ttl)
                self._dedup_order.append(key)
                return DedupResult.FIRST_COPY
            entry.receptions.append((gateway_eui, meta))
            return DedupResult.DUPLICATE_COPY

    def dedup_entry(self, key):
        with self._lock:
            entry = self._dedup.get(key)
            if entry is None or entry.expired(self.clock()):
                return None
            return DedupEntry(entry.key, entry.first_seen, list(entry.receptions), entry.ttl,
                              entry.completed, entry.downlink_sent)

    def dedup_mark(self, key, **fields):
        with self._lock:
            entry = self._dedup.get(key)
            if entry is not None:
                for k, v in fields.items():
                    setattr(entry, k, v)

    # downlink queues

    def _require(self, dev_addr):
        if dev_addr not in self._sessions:
            raise NoSession("no session for %08x" % dev_addr)

    def enqueue_downlink(self, dev_addr: int, item, queue="app"):
        with self._lock:
            self._require(dev_addr)
            if queue == "app":
                self._app_q.setdefault(dev_addr, deque()).append(item)
            else:
                if not isinstance(item, MacCommandQueueEntry):
                    item = MacCommandQueueEntry(item, created_at=self.clock())
                self._mac_q.setdefault(dev_addr, []).append(item)

    def app_queue(self, dev_addr):
        with self._lock:
            return list(self._app_q.get(dev_addr, ()))

    def mac_queue(self, dev_addr):
        with self._lock:
            return list(self._mac_q.get(dev_addr, ()))

    def mac_queue_update(self, dev_addr, fn):
        """Run ``fn(entries)`` on the live MAC queue list under the store lock."""
        with self._lock:
            return fn(self._mac_q.setdefault(dev_addr, []))

    def take_mac_commands(self, dev_addr, limit, sent_after_fcnt=None):
        """Pending MAC commands in FIFO order up to ``limit`` bytes.

        Commands that the device answers move to Sent; the rest leave the queue.
        """
        with self._lock:
            q = self._mac_q.get(dev_addr, [])
            taken, used = [], 0
            for entry in list(q):
                if entry.state != CmdState.PENDING:
                    continue
                if used + len(entry.cmd) > limit:
                    break
                used += len(entry.cmd)
                taken.append(entry.cmd)
                if entry.cmd.cid in maccmd.ANSWERED:
                    entry.state = CmdState.SENT
                    entry.sent_after_fcnt = sent_after_fcnt
                else:
                    q.remove(entry)
            return taken

    def pending_mac_bytes(self, dev_addr):
        with self._lock:
            return sum(len(e.cmd) for e in self._mac_q.get(dev_addr, ()) if e.state == CmdState.PENDING)

    def dequeue_for_frame(self, dev_addr: int, max_app_bytes: int, sent_after_fcnt=None) -> DownlinkPlan:
        """Choose what goes into the next downlink frame.

        MAC commands take FOpts space first. When more than 15 bytes of MAC
        commands are waiting they travel alone as an FPort 0 payload and the
        application item waits for a later frame.
        """
        with self._lock:
            self._require(dev_addr)
            plan = DownlinkPlan()
            app_q = self._app_q.get(dev_addr)
            mac_bytes = self.pending_mac_bytes(dev_addr)
            if mac_bytes > MAX_FOPTS:
                plan.mac_commands = self.take_mac_commands(dev_addr, max_app_bytes, sent_after_fcnt)
                plan.mac_as_payload = True
            else:
                plan.mac_commands = self.take_mac_commands(dev_addr, MAX_FOPTS, sent_after_fcnt)
                fopts_len = sum(len(c) for c in plan.mac_commands)
                if app_q and len(app_q[0].payload) + fopts_len <= max_app_bytes:
                    plan.app = app_q.popleft()
            plan.fpending = bool(app_q) or self.pending_mac_bytes(dev_addr) > 0
            return plan

    # frame log and application uplinks

    def log_frame(self, dev_eui: bytes, record: dict):
        now = self.clock()
        with self._lock:
            log = self._frames.setdefault(dev_eui, deque(maxlen=FRAME_LOG))
            log.append(dict(record, ts=now))

    def frames(self, dev_eui: bytes, limit=50):
        now = self.clock()
        with self._lock:
            log = self._frames.get(dev_eui, deque())
            while log and now - log[0]["ts"] > self.frame_retention:
                log.popleft()
            return list(log)[-limit:] if limit else []
