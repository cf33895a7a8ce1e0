"""Load sweeps: one fresh server process per point, then a knee fit.

Every point starts ``python3 -m lorans serve`` on ephemeral ports, registers
the fleet through the admin API, runs one :func:`run_scenario` and kills the
server, so no state leaks from one point into the next.
"""

from __future__ import annotations

import asyncio
import json
import logging
import math
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from .loadgen import LoadReport, ScenarioConfig, run_scenario

log = logging.getLogger(__name__)

# expected knees at the default budget: about 490 nodes (k=1) and 980 (k=2)
K1_POINTS = (150, 250, 350, 450, 700, 900, 1100)
K2_POINTS = (300, 500, 700, 900, 1400, 1700, 2000)


@dataclass
class SweepSettings:
    period: float = 40.0
    timeout: float = 5.0
    warmup: float = 15.0
    window: float = 20.0
    # emulated per-uplink budget of one central instance, see CentralConfig.work_ms
    work_ms: float = 80.0
    confirmed: bool = True
    demod_limit: Optional[int] = None
    seed: int = 1
    startup_timeout: float = 20.0


@dataclass
class KneeFit:
    knee: float
    slope: float
    intercept: float
    plateau: float
    r2: float
    flat_deviation: float
    linear_points: list = field(default_factory=list)
    flat_points: list = field(default_factory=list)


class ServerProcess:
    """``lorans serve`` in a child process; the ready line carries its ports."""

    def __init__(self, instances=1, work_ms=0.0, extra: Sequence[str] = (), startup_timeout=20.0):
        cmd = [sys.executable, "-m", "lorans", "serve", "--host", "127.0.0.1", "--port", "0",
               "--admin-port", "0", "--instances", str(instances), "--work-ms", str(work_ms), *extra]
        self.proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True)
        line = self._readline(startup_timeout)
        try:
            ready = json.loads(line)
        except ValueError:
            self.close()
            raise RuntimeError("server did not start: %r" % line) from None
        self.udp_port = ready["udp_port"]
        self.admin_url = ready["admin_url"]

    def _readline(self, timeout):
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            line = self.proc.stdout.readline()
            if line:
                return line
            if self.proc.poll() is not None:
                break
        return ""

    def close(self):
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_point(nodes: int, instances: int, settings: SweepSettings) -> LoadReport:
    with ServerProcess(instances, settings.work_ms, startup_timeout=settings.startup_timeout) as srv:
        cfg = ScenarioConfig(
            nodes=nodes, period=settings.period, timeout=settings.timeout,
            duration=settings.warmup + settings.window, warmup=settings.warmup, confirmed=settings.confirmed,
            demod_limit=settings.demod_limit, seed=settings.seed, server=("127.0.0.1", srv.udp_port),
            admin_url=srv.admin_url)
        return asyncio.run(run_scenario(cfg))


def run_sweep(points: Sequence[int], instances: int, settings: Optional[SweepSettings] = None,
              progress=None) -> list:
    settings = settings or SweepSettings()
    reports = []
    for n in points:
        t0 = time.monotonic()
        report = run_point(n, instances, settings)
        reports.append(report)
        if progress is not None:
            progress(instances, report, time.monotonic() - t0)
    return reports


def _ols(xs, ys):
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    slope = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / sxx
    intercept = my - slope * mx
    ss_tot = sum((y - my) ** 2 for y in ys)
    ss_res = sum((y - (slope * x + intercept)) ** 2 for x, y in zip(xs, ys))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return slope, intercept, r2, ss_res


def fit_knee(xs: Sequence[float], ys: Sequence[float], min_linear=2, min_flat=2) -> KneeFit:
    """Two-piece fit: a line through the low points, a constant through the rest.

    Every split leaving at least ``min_linear`` and ``min_flat`` points is
    tried; the one with the smallest total squared error wins. The knee is
    where the line meets the plateau.
    """
    pts = sorted(zip(xs, ys))
    if len(pts) < min_linear + min_flat:
        raise ValueError("need at least %d points" % (min_linear + min_flat))
    best = None
    for split in range(min_linear, len(pts) - min_flat + 1):
        low, high = pts[:split], pts[split:]
        slope, intercept, r2, sse_low = _ols([p[0] for p in low], [p[1] for p in low])
        plateau = sum(p[1] for p in high) / len(high)
        sse = sse_low + sum((p[1] - plateau) ** 2 for p in high)
        if best is None or sse < best[0]:
            best = (sse, split, slope, intercept, r2, plateau)
    _, split, slope, intercept, r2, plateau = best
    knee = (plateau - intercept) / slope if slope > 0 else math.nan
    high = pts[split:]
    dev = max(abs(y - plateau) for _, y in high) / plateau if plateau else math.inf
    return KneeFit(knee=knee, slope=slope, intercept=intercept, plateau=plateau, r2=r2, flat_deviation=dev,
                   linear_points=[list(p) for p in pts[:split]], flat_points=[list(p) for p in high])


def knee_of(reports: Sequence[LoadReport]) -> KneeFit:
    return fit_knee([r.nodes for r in reports], [r.achieved_throughput for r in reports])


def sweep_summary(results: dict) -> dict:
    """``results`` maps instance count to its reports; returns a JSON-ready digest."""
    out = {}
    for k, reports in results.items():
        fit = knee_of(reports)
        out[str(k)] = dict(fit=asdict(fit), points=[r.to_dict() for r in reports])
    return out
