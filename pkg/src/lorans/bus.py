"""Topic-based publish/subscribe with consumer groups.

Every message published on a topic is handed to exactly one member of each
group subscribed to that topic, members being chosen round-robin. Delivery
is at-least-once: a message stays owned by its member until acknowledged,
and if the member leaves (or crashes) its unacknowledged and queued messages
are reassigned to the surviving members.

Payloads are bytes of the form ``schema-tag NEWLINE body`` so that a topic
can refuse records of the wrong kind without decoding the body.
"""

from __future__ import annotations

import abc
import itertools
import json
import threading
import time
from collections import deque
from dataclasses import dataclass, replace
from typing import Optional

DEFAULT_CAPACITY = 65536

STANDARD_TOPICS = {
    "uplink.raw": "uplink",
    "uplink.join": "uplink",
    "uplink.app": "app-uplink",
    "uplink.mac": "mac-uplink",
    "joinserver.in": "join-request",
    "downlink.tx": "downlink",
    "appserver.in": "app-uplink",
    "appserver.out": "app-downlink",
    "controller.cmds": "mac-command",
}


class BusError(Exception):
    pass


class UnknownTopic(BusError):
    pass


class BufferFull(BusError):
    pass


class SchemaMismatch(BusError):
    pass


class EmptyGroup(BusError):
    pass


@dataclass(frozen=True)
class BusMessage:
    topic: str
    key: Optional[bytes]
    payload: bytes
    seq: int
    ts: float
    redelivered: bool = False

    @property
    def schema(self) -> str:
        return schema_of(self.payload)

    def record(self) -> dict:
        return decode_record(self.payload)


def encode_record(schema: str, body: dict) -> bytes:
    return schema.encode("ascii") + b"\n" + json.dumps(body, separators=(",", ":")).encode("utf-8")


def schema_of(payload: bytes) -> str:
    return payload.split(b"\n", 1)[0].decode("ascii", "replace")


def decode_record(payload: bytes) -> dict:
    return json.loads(payload.split(b"\n", 1)[1])


class MessageBus(abc.ABC):
    """What the server modules need from a broker."""

    @abc.abstractmethod
    def register_topic(self, name: str, schema: str) -> None: ...

    @abc.abstractmethod
    def publish(self, topic: str, key: Optional[bytes], payload: bytes) -> int: ...

    @abc.abstractmethod
    def subscribe(self, topics, group_id: str) -> "Consumer": ...

    @abc.abstractmethod
    def unsubscribe(self, consumer: "Consumer") -> None: ...

    def publish_record(self, topic, key, schema, body) -> int:
        return self.publish(topic, key, encode_record(schema, body))


class Consumer:
    """Handle of one group member. Use from a single worker at a time."""

    _ids = itertools.count()

    def __init__(self, bus: "InProcessBus", group_id: str, topics):
        self.id = next(Consumer._ids)
        self.group_id = group_id
        self.topics = tuple(topics)
        self._bus = bus
        self._cond = threading.Condition(bus._lock)
        self._inbox: deque = deque()
        self._unacked: dict = {}
        self.closed = False
        self.delivered = 0

    def get(self, timeout: Optional[float] = None) -> Optional[BusMessage]:
        """Next message for this member, or None on timeout/close."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not self._inbox:
                if self.closed:
                    return None
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._cond.wait(remaining)
            msg = self._inbox.popleft()
            self._unacked[(msg.topic, msg.seq)] = msg
            self.delivered += 1
            return msg

    def ack(self, msg: BusMessage) -> None:
        with self._cond:
            if self._unacked.pop((msg.topic, msg.seq), None) is not None:
                self._bus._groups[(msg.topic, self.group_id)].pending -= 1

    def close(self) -> None:
        self._bus.unsubscribe(self)

    @property
    def backlog(self) -> int:
        with self._cond:
            return len(self._inbox)

    def _push(self, msg):
        self._inbox.append(msg)
        self._cond.notify()

    def _push_sorted(self, msgs):
        merged = sorted(list(self._inbox) + list(msgs), key=lambda m: (m.ts, m.seq))
        self._inbox = deque(merged)
        self._cond.notify()


class _Group:
    def __init__(self, group_id, topic):
        self.group_id = group_id
        self.topic = topic
        self.members: list = []
        self.rr_cursor = 0
        self.backlog: deque = deque()
        self.pending = 0

    def assign(self, msg):
        """Round-robin choice of the member for ``msg``."""
        if not self.members:
            raise EmptyGroup(self.group_id)
        member = self.members[self.rr_cursor % len(self.members)]
        self.rr_cursor = (self.rr_cursor + 1) % len(self.members)
        return member


class _Topic:
    def __init__(self, name, schema):
        self.name = name
        self.schema = schema
        self.next_seq = 0
        self.groups: dict = {}


class InProcessBus(MessageBus):
    def __init__(self, capacity: int = DEFAULT_CAPACITY, topics: Optional[dict] = None, clock=time.time):
        self.capacity = capacity
        self._clock = clock
        self._lock = threading.RLock()
        self._topics: dict = {}
        self._groups: dict = {}
        for name, schema in (STANDARD_TOPICS if topics is None else topics).items():
            self.register_topic(name, schema)

    def register_topic(self, name, schema):
        with self._lock:
            if name not in self._topics:
                self._topics[name] = _Topic(name, schema)

    @property
    def topics(self):
        return {t.name: t.schema for t in self._topics.values()}

    def _topic(self, name):
        try:
            return self._topics[name]
        except KeyError:
            raise UnknownTopic(name) from None

    def publish(self, topic, key, payload):
        with self._lock:
            t = self._topic(topic)
            if schema_of(payload) != t.schema:
                raise SchemaMismatch("%s expects %r records, got %r" % (topic, t.schema, schema_of(payload)))
            for g in t.groups.values():
                if g.pending >= self.capacity:
                    raise BufferFull("%s/%s holds %d undelivered messages" % (topic, g.group_id, g.pending))
            msg = BusMessage(topic, key, payload, t.next_seq, self._clock())
            t.next_seq += 1
            for g in t.groups.values():
                g.pending += 1
                if g.members:
                    g.assign(msg)._push(msg)
                else:
                    g.backlog.append(msg)
            return msg.seq

    def subscribe(self, topics, group_id):
        if isinstance(topics, str):
            topics = [topics]
        with self._lock:
            for name in topics:
                self._topic(name)
            consumer = Consumer(self, group_id, topics)
            for name in topics:
                t = self._topics[name]
                g = t.groups.get(group_id)
                if g is None:
                    g = t.groups[group_id] = _Group(group_id, name)
                    self._groups[(name, group_id)] = g
                g.members.append(consumer)
                while g.backlog:
                    msg = g.backlog.popleft()
                    g.assign(msg)._push(msg)
            return consumer

    def unsubscribe(self, consumer):
        """Remove a member; its queued and unacknowledged messages move to the survivors."""
        with self._lock:
            if consumer.closed:
                return
            consumer.closed = True
            orphans = sorted(list(consumer._inbox) + list(consumer._unacked.values()), key=lambda m: (m.ts, m.seq))
            consumer._inbox.clear()
            consumer._unacked.clear()
            for name in consumer.topics:
                g = self._groups[(name, consumer.group_id)]
                idx = g.members.index(consumer)
                g.members.pop(idx)
                if g.members:
                    if idx < g.rr_cursor:
                        g.rr_cursor -= 1
                    g.rr_cursor %= len(g.members)
                else:
                    g.rr_cursor = 0
            reassigned: dict = {}
            for msg in orphans:
                g = self._groups[(msg.topic, consumer.group_id)]
                msg = replace(msg, redelivered=True)
                if g.members:
                    reassigned.setdefault(g.assign(msg), []).append(msg)
                else:
                    g.backlog.append(msg)
            for member, msgs in reassigned.items():
                member._push_sorted(msgs)
            consumer._cond.notify_all()

    def group_members(self, topic, group_id):
        with self._lock:
            g = self._groups.get((topic, group_id))
            return list(g.members) if g else []

    def pending(self, topic, group_id) -> int:
        with self._lock:
            g = self._groups.get((topic, group_id))
            return g.pending if g else 0
