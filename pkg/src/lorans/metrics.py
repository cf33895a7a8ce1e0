"""Thread-safe counters and latency samples for /api/stats."""

from __future__ import annotations

import statistics
import threading
from collections import defaultdict, deque


class Metrics:
    def __init__(self, name: str, samples: int = 4096):
        self.name = name
        self._lock = threading.Lock()
        self._counters = defaultdict(int)
        self._samples = defaultdict(lambda: deque(maxlen=samples))

    def inc(self, counter: str, label: str = None, n: int = 1):
        key = counter if label is None else "%s{%s}" % (counter, label)
        with self._lock:
            self._counters[key] += n

    def observe(self, name: str, value: float):
        with self._lock:
            self._samples[name].append(value)

    def get(self, counter: str, label: str = None) -> int:
        key = counter if label is None else "%s{%s}" % (counter, label)
        with self._lock:
            return self._counters.get(key, 0)

    def snapshot(self) -> dict:
        with self._lock:
            out = dict(self._counters)
            for name, values in self._samples.items():
                if values:
                    vals = sorted(values)
                    out[name] = dict(count=len(vals), median=statistics.median(vals),
                                     p95=vals[int(0.95 * (len(vals) - 1))], max=vals[-1])
            return out
