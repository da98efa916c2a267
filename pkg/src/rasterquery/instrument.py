"""Lightweight phase timers feeding the query timing report.

A collector splits wall time into the four reported categories: I/O (disk
and cache loads), raster (canvas rendering and pixel classification),
polygon processing (triangulation and boundary-index builds), and CPU (the
residual). Phases annotate code regions; nesting the same phase does not
double-count.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

_active: list = []


@dataclass
class TimingReport:
    io_ms: float = 0.0
    raster_ms: float = 0.0
    polygon_processing_ms: float = 0.0
    cpu_ms: float = 0.0
    total_ms: float = 0.0

    def columns(self) -> dict:
        return {
            "io_ms": self.io_ms,
            "raster_ms": self.raster_ms,
            "polygon_processing_ms": self.polygon_processing_ms,
            "cpu_ms": self.cpu_ms,
            "total_ms": self.total_ms,
        }


@dataclass
class _Collector:
    started: float = field(default_factory=time.perf_counter)
    sums: dict = field(default_factory=lambda: {"io": 0.0, "raster": 0.0, "polygon": 0.0})
    depth: dict = field(default_factory=lambda: {"io": 0, "raster": 0, "polygon": 0})

    def report(self) -> TimingReport:
        total = (time.perf_counter() - self.started) * 1000.0
        io = min(self.sums["io"] * 1000.0, total)
        raster = min(self.sums["raster"] * 1000.0, total - io)
        poly = min(self.sums["polygon"] * 1000.0, total - io - raster)
        cpu = max(total - io - raster - poly, 0.0)
        return TimingReport(io, raster, poly, cpu, total)


@contextmanager
def collect():
    col = _Collector()
    _active.append(col)
    try:
        yield col
    finally:
        _active.remove(col)


@contextmanager
def phase(name: str):
    if not _active:
        yield
        return
    cols = [c for c in _active if c.depth[name] == 0]
    for c in cols:
        c.depth[name] += 1
    t0 = time.perf_counter()
    try:
        yield
    finally:
        dt = time.perf_counter() - t0
        for c in cols:
            c.depth[name] -= 1
            c.sums[name] += dt
