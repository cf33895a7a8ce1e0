import collections
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lorans.bus import (BufferFull, EmptyGroup, InProcessBus, SchemaMismatch, UnknownTopic,
                        _Group, encode_record)

REC = encode_record("t", {})


def make_bus(capacity=65536):
    return InProcessBus(capacity=capacity, topics={"t": "t", "u": "u"})


def drain(consumer):
    out = []
    while (m := consumer.get(timeout=0)) is not None:
        consumer.ack(m)
        out.append(m)
    return out


def test_seq_numbers_and_unknown_topic():
    bus = make_bus()
    assert bus.publish("t", None, REC) == 0
    assert bus.publish("t", None, REC) == 1
    with pytest.raises(UnknownTopic):
        bus.publish("nope", None, REC)
    with pytest.raises(UnknownTopic):
        bus.subscribe("nope", "g")
    with pytest.raises(SchemaMismatch):
        bus.publish("u", None, REC)


def test_single_subscriber_gets_everything():
    bus = make_bus()
    c = bus.subscribe("t", "g")
    for _ in range(10):
        bus.publish("t", None, REC)
    assert [m.seq for m in drain(c)] == list(range(10))


def test_second_subscriber_alternates():
    bus = make_bus()
    a = bus.subscribe("t", "g")
    bus.publish("t", None, REC)
    b = bus.subscribe("t", "g")
    for _ in range(10):
        bus.publish("t", None, REC)
    got_a, got_b = drain(a), drain(b)
    assert len(got_a) + len(got_b) == 11
    assert abs(len(got_a) - 1 - len(got_b)) <= 1


def test_round_robin_exact_counts():
    bus = make_bus()
    members = [bus.subscribe("t", "g") for _ in range(4)]
    for _ in range(10000):
        bus.publish("t", None, REC)
    assert [len(drain(c)) for c in members] == [2500] * 4


def test_assign_empty_group_raises_and_retains():
    g = _Group("g", "t")
    with pytest.raises(EmptyGroup):
        g.assign(object())
    bus = make_bus()
    c = bus.subscribe("t", "g")
    c.close()
    for _ in range(3):
        bus.publish("t", None, REC)
    late = bus.subscribe("t", "g")
    assert [m.seq for m in drain(late)] == [0, 1, 2]


def test_member_leaves_midstream():
    bus = make_bus()
    a, b, c = (bus.subscribe("t", "g") for _ in range(3))
    for _ in range(5):
        bus.publish("t", None, REC)
    # a takes one message without acking, then crashes
    taken = a.get(timeout=0)
    assert taken is not None
    bus.unsubscribe(a)
    for _ in range(5):
        bus.publish("t", None, REC)
    got_b, got_c = drain(b), drain(c)
    seqs = sorted(m.seq for m in got_b + got_c)
    assert seqs == list(range(10))
    assert any(m.redelivered for m in got_b + got_c)


def test_each_group_gets_a_copy():
    bus = make_bus()
    g1 = [bus.subscribe("t", "one") for _ in range(2)]
    g2 = bus.subscribe("t", "two")
    for _ in range(6):
        bus.publish("t", None, REC)
    assert sorted(m.seq for c in g1 for m in drain(c)) == list(range(6))
    assert [m.seq for m in drain(g2)] == list(range(6))


def test_buffer_full_backpressure():
    bus = make_bus(capacity=3)
    c = bus.subscribe("t", "g")
    for _ in range(3):
        bus.publish("t", None, REC)
    with pytest.raises(BufferFull):
        bus.publish("t", None, REC)
    m = c.get(timeout=0)
    c.ack(m)
    bus.publish("t", None, REC)


def test_multi_topic_consumer():
    bus = make_bus()
    c = bus.subscribe(["t", "u"], "g")
    bus.publish("t", None, REC)
    bus.publish("u", None, encode_record("u", {"x": 1}))
    got = drain(c)
    assert [(m.topic, m.seq) for m in got] == [("t", 0), ("u", 0)]
    assert got[1].record() == {"x": 1}


def test_blocking_get_wakes_on_publish():
    bus = make_bus()
    c = bus.subscribe("t", "g")
    result = []
    th = threading.Thread(target=lambda: result.append(c.get(timeout=5)))
    th.start()
    bus.publish("t", None, REC)
    th.join()
    assert result[0].seq == 0


def test_concurrent_publishers_exactly_once():
    bus = make_bus()
    members = [bus.subscribe("t", "g") for _ in range(3)]
    seen = collections.Counter()
    lock = threading.Lock()
    stop = threading.Event()

    def work(c):
        while not stop.is_set() or c.backlog:
            m = c.get(timeout=0.05)
            if m is None:
                continue
            last = work.last.get(c.id, -1)
            assert m.seq > last
            work.last[c.id] = m.seq
            with lock:
                seen[m.seq] += 1
            c.ack(m)
    work.last = {}

    workers = [threading.Thread(target=work, args=(c,)) for c in members]
    pubs = [threading.Thread(target=lambda: [bus.publish("t", None, REC) for _ in range(500)]) for _ in range(4)]
    for th in workers + pubs:
        th.start()
    for th in pubs:
        th.join()
    stop.set()
    for th in workers:
        th.join()
    assert len(seen) == 2000 and set(seen.values()) == {1}


@settings(max_examples=50, deadline=None)
@given(k=st.integers(1, 8), n=st.integers(0, 500))
def test_balance_property(k, n):
    bus = make_bus()
    members = [bus.subscribe("t", "g") for _ in range(k)]
    for _ in range(n):
        bus.publish("t", None, REC)
    counts = [len(drain(c)) for c in members]
    assert sum(counts) == n and max(counts) - min(counts) <= 1


@settings(max_examples=50, deadline=None)
@given(k=st.integers(2, 6), n=st.integers(1, 200), cut=st.integers(0, 200), victim=st.integers(0, 5))
def test_failover_property(k, n, cut, victim):
    bus = make_bus()
    members = [bus.subscribe("t", "g") for _ in range(k)]
    cut = min(cut, n)
    for _ in range(cut):
        bus.publish("t", None, REC)
    bus.unsubscribe(members[victim % k])
    for _ in range(n - cut):
        bus.publish("t", None, REC)
    survivors = [c for c in members if not c.closed]
    got = sorted(m.seq for c in survivors for m in drain(c))
    assert got == list(range(n))
