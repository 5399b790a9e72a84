"""Micro-benchmarks for the hot kernels, gated on agreement with naive references."""

from __future__ import annotations

import csv
import platform
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .bilinear import bilinear_outer, make_region_grid, region_pool
from .layers import conv2d
from .rng import Stream
from .tensor import Tensor

GATE_TOL = 1e-10
CSV_FIELDS = ("kernel", "shape", "reps", "median_us", "p90_us", "checksum", "mults")


def naive_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Direct accumulation over kernel offsets (no patch unfolding)."""
    co, ci, kh, kw = w.shape
    c, h, wd = x.shape
    ho, wo = h - kh + 1, wd - kw + 1
    out = np.empty((co, ho, wo))
    for o in range(co):
        acc = np.full((ho, wo), b[o])
        for i in range(kh):
            for j in range(kw):
                acc += np.tensordot(w[o, :, i, j], x[:, i : i + ho, j : j + wo], axes=1)
        out[o] = acc
    return out


def naive_bilinear(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    m, h, w = fa.shape
    n = fb.shape[0]
    out = np.empty((m * n, h, w))
    for r in range(h):
        for c in range(w):
            out[:, r, c] = np.outer(fa[:, r, c], fb[:, r, c]).reshape(-1)
    return out


def naive_region_pool(bmap: np.ndarray, grid) -> np.ndarray:
    rows = []
    for (r0, r1), (c0, c1) in grid.regions:
        rows.append(bmap[:, r0:r1, c0:c1].sum(axis=(1, 2)))
    return np.array(rows)


@dataclass
class BenchCase:
    kernel: str
    shape: str
    reps: int
    mults: int
    median_us: float | None = None
    p90_us: float | None = None
    checksum: float | None = None
    max_abs_diff: float | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class Kernel:
    name: str
    shape: str
    mults: int
    fast: Callable[[], np.ndarray]
    reference: Callable[[], np.ndarray]


def default_suite(seed: int = 0, channels: int = 32) -> list[Kernel]:
    """Kernels at the full-size single-part shapes (72x60 part, 14x11 map)."""
    gen = Stream(seed).split("bench").gen
    c = channels
    x1 = gen.uniform(0, 1, (3, 72, 60))
    w1, b1 = gen.uniform(-0.1, 0.1, (c, 3, 7, 7)), gen.uniform(-0.1, 0.1, c)
    x2 = gen.uniform(0, 1, (c, 33, 27))
    w2, b2 = gen.uniform(-0.1, 0.1, (c, c, 5, 5)), gen.uniform(-0.1, 0.1, c)
    fa, fb = gen.uniform(0, 1, (c, 14, 11)), gen.uniform(0, 1, (c, 14, 11))
    bmap = gen.uniform(0, 1, (c * c, 14, 11))
    grid = make_region_grid(14, 11, 5, 5)
    return [
        Kernel("conv2d", f"{c}x3x7x7 @ 3x72x60", c * 3 * 49 * 66 * 54,
               lambda: conv2d(Tensor(x1), Tensor(w1), Tensor(b1)).data, lambda: naive_conv2d(x1, w1, b1)),
        Kernel("conv2d", f"{c}x{c}x5x5 @ {c}x33x27", c * c * 25 * 29 * 23,
               lambda: conv2d(Tensor(x2), Tensor(w2), Tensor(b2)).data, lambda: naive_conv2d(x2, w2, b2)),
        Kernel("bilinear_outer", f"M={c},N={c},14x11", c * c * 14 * 11,
               lambda: bilinear_outer(Tensor(fa), Tensor(fb)).data, lambda: naive_bilinear(fa, fb)),
        Kernel("region_pool", f"{c * c}x14x11 cell 5x5", 0,
               lambda: region_pool(Tensor(bmap), grid).matrix.data, lambda: naive_region_pool(bmap, grid)),
    ]


def run_case(k: Kernel, reps: int = 20, warmup: int = 2) -> BenchCase:
    case = BenchCase(k.name, k.shape, reps, k.mults)
    got, want = k.fast(), k.reference()
    diff = float(np.max(np.abs(got - want))) if got.shape == want.shape else float("inf")
    case.max_abs_diff = diff
    if not diff <= GATE_TOL:
        case.error = f"optimized and reference outputs differ (max abs diff {diff:.3e})"
        return case
    for _ in range(warmup):
        k.fast()
    times = []
    out = got
    for _ in range(reps):
        t0 = time.perf_counter()
        out = k.fast()
        times.append((time.perf_counter() - t0) * 1e6)
    case.median_us = float(np.median(times))
    case.p90_us = float(np.percentile(times, 90))
    case.checksum = float(np.sum(out))
    return case


def run_bench(suite: list[Kernel] | None = None, reps: int = 20, warmup: int = 2) -> list[BenchCase]:
    return [run_case(k, reps, warmup) for k in (suite if suite is not None else default_suite())]


def machine_info() -> str:
    return f"{platform.platform()} | python {platform.python_version()} | numpy {np.__version__}"


def write_bench_csv(cases: list[BenchCase], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {machine_info()}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for c in cases:
            if not c.ok:
                fh.write(f"# {c.kernel} [{c.shape}] skipped: {c.error}\n")
                continue
            w.writerow([c.kernel, c.shape, c.reps, f"{c.median_us:.1f}", f"{c.p90_us:.1f}", repr(c.checksum), c.mults])
    return path
