"""Single-threaded bus consumer with a private timer queue.

Each module instance (central server, join server, ...) is one ``Worker``:
it processes its deliveries strictly one after another, which is how the
deployment scales: by adding group members, never by threading inside one.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time

log = logging.getLogger(__name__)


class Worker:
    group = "worker"
    topics: tuple = ()

    def __init__(self, bus, name=None, clock=time.time):
        self.bus = bus
        self.name = name or self.group
        self.clock = clock
        self.consumer = None
        self._timers = []
        self._tick = itertools.count()
        self._thread = None
        self._running = threading.Event()
        self.busy_seconds = 0.0
        self.processed = 0
        self.started_at = None

    # lifecycle

    def subscribe(self):
        if self.consumer is None:
            self.consumer = self.bus.subscribe(list(self.topics), self.group)
        return self

    def start(self):
        self.subscribe()
        self._running.set()
        self.started_at = time.monotonic()
        self._thread = threading.Thread(target=self._loop, name=self.name, daemon=True)
        self._thread.start()
        return self

    def stop(self, timeout=2.0):
        """Finish due work and leave the group; pending timers' messages are redelivered."""
        self._running.clear()
        if self._thread is not None:
            self._thread.join(timeout)
        if self.consumer is not None:
            self.bus.unsubscribe(self.consumer)

    def crash(self):
        """Stop abruptly: nothing in flight is acknowledged."""
        self._running.clear()
        if self.consumer is not None:
            self.bus.unsubscribe(self.consumer)
        if self._thread is not None:
            self._thread.join(2.0)
        self._timers.clear()

    @property
    def alive(self):
        return self._running.is_set()

    # timers

    def call_at(self, deadline, fn, *args):
        heapq.heappush(self._timers, (deadline, next(self._tick), fn, args))

    def run_due_timers(self, now=None):
        now = self.clock() if now is None else now
        while self._timers and self._timers[0][0] <= now:
            _, _, fn, args = heapq.heappop(self._timers)
            fn(*args)

    def next_deadline(self):
        return self._timers[0][0] if self._timers else None

    # processing

    def handle(self, msg):
        raise NotImplementedError

    def process(self, msg):
        """Handle one delivery; handlers ack themselves (possibly later, from a timer)."""
        t0 = time.perf_counter()
        try:
            self.handle(msg)
        except Exception:
            log.exception("%s failed on %s/%d", self.name, msg.topic, msg.seq)
            self.consumer.ack(msg)
        self.processed += 1
        self.busy_seconds += time.perf_counter() - t0

    def drain(self, limit=None):
        """Synchronously process whatever is queued (tests and virtual-time runs)."""
        n = 0
        while limit is None or n < limit:
            self.run_due_timers()
            msg = self.consumer.get(timeout=0)
            if msg is None:
                break
            self.process(msg)
            n += 1
        self.run_due_timers()
        return n

    def _loop(self):
        while self._running.is_set():
            deadline = self.next_deadline()
            wait = 0.05
            if deadline is not None:
                wait = max(0.0, min(wait, deadline - self.clock()))
            msg = self.consumer.get(timeout=wait)
            if not self._running.is_set():
                break
            if self._timers:
                t0 = time.perf_counter()
                self.run_due_timers()
                self.busy_seconds += time.perf_counter() - t0
            if msg is not None:
                self.process(msg)

    def stats(self):
        up = time.monotonic() - self.started_at if self.started_at else 0.0
        return dict(name=self.name, processed=self.processed, busy_seconds=round(self.busy_seconds, 4),
                    uptime=round(up, 3), backlog=self.consumer.backlog if self.consumer else 0,
                    alive=self.alive)
