"""Wall-clock scaling probe for the windowed cross-attention.

Times the dual cross-attention body over a sweep of square inputs at fixed
window geometry and fits the log-log slope of wall time against pixel count.
A slope near 1 confirms the linear-in-pixels design that windowing (as
opposed to global attention, which is quadratic) is meant to buy.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dpfm import (WindowGeometry, attention_mac_count, dual_cross_attention,
                   init_dpfm, partition_windows)
from .errors import ParameterError
from .tensor import Tensor, no_grad

BENCH_COLUMNS = ("h", "w", "m", "r", "heads", "c",
                 "score_macs", "proj_macs", "wall_ns")
DEFAULT_SIZES = (32, 64, 128)


@dataclass(frozen=True)
class BenchPoint:
    h: int
    w: int
    score_macs: int
    proj_macs: int
    wall_ns: int


def time_attention(h: int, w: int, geom: WindowGeometry, c: int,
                   warmup: int = 1, reps: int = 3, seed: int = 0) -> int:
    """Best-of-reps wall time (ns) of one dual cross-attention forward."""
    if warmup < 0 or reps < 1:
        raise ParameterError(f"bad warmup/reps ({warmup}, {reps})")
    rng = np.random.default_rng(seed)
    weights = init_dpfm(c, geom, rng)
    x = Tensor(rng.standard_normal((1, c, h, w)))
    d = Tensor(rng.standard_normal((1, c, h, w)))
    with no_grad():
        xw = partition_windows(x, geom)
        dw = partition_windows(d, geom)
        for _ in range(warmup):
            dual_cross_attention(xw, dw, weights, geom)
        best = None
        for _ in range(reps):
            t0 = time.perf_counter_ns()
            dual_cross_attention(xw, dw, weights, geom)
            dt = time.perf_counter_ns() - t0
            best = dt if best is None else min(best, dt)
    return best


def run_bench(sizes=DEFAULT_SIZES, window: int = 8, overlap: float = 0.5,
              heads: int = 2, channels: int = 8, out_csv=None,
              warmup: int = 1, reps: int = 3) -> list:
    """Sweep square sizes; returns BenchPoints and optionally writes the CSV."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2:
        raise ParameterError("need at least two sizes to fit a slope")
    if any(s < window for s in sizes):
        raise ParameterError(f"sizes must be >= window {window}, got {sizes}")
    geom = WindowGeometry(window, overlap, heads)
    points = []
    for s in sizes:
        macs = attention_mac_count(s, s, geom, channels)
        wall = time_attention(s, s, geom, channels, warmup=warmup, reps=reps)
        points.append(BenchPoint(h=s, w=s, score_macs=macs.score,
                                 proj_macs=macs.proj, wall_ns=wall))
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(BENCH_COLUMNS)
            for p in points:
                wr.writerow([p.h, p.w, window, repr(float(overlap)), heads,
                             channels, p.score_macs, p.proj_macs, p.wall_ns])
    return points


def loglog_slope(points: list) -> float:
    """Least-squares slope of log(wall time) against log(pixel count)."""
    if len(points) < 2:
        raise ParameterError("need at least two points to fit a slope")
    x = np.log([float(p.h * p.w) for p in points])
    y = np.log([float(p.wall_ns) for p in points])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)
