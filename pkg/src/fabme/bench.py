"""Wall-time benchmark harness for the scan operator and a naive quadratic
attention baseline, defended by the linear-vs-quadratic growth check.

Timings are forward-only at float32; results are CSV rows
(operator, L, d_model, d_state, mean_ns, p95_ns).
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass

import numpy as np

from fabme import tensor as T
from fabme.scan import ScanParams, ss2d
from fabme.tensor import Tensor

__all__ = ["BenchRow", "time_fn", "bench_ss2d", "bench_attention",
           "run_sweep", "write_bench_csv", "growth_ratios"]


@dataclass
class BenchRow:
    operator: str
    L: int
    d_model: int
    d_state: int
    mean_ns: float
    p95_ns: float


def time_fn(fn, repeats: int = 5, warmup: int = 2) -> tuple[float, float]:
    """Mean and p95 wall time of fn() in nanoseconds."""
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    samples.sort()
    p95 = samples[min(len(samples) - 1, math.ceil(0.95 * len(samples)) - 1)]
    return float(np.mean(samples)), float(p95)


def _square_map(L: int, d_model: int, rng) -> Tensor:
    side = int(round(math.sqrt(L)))
    if side * side != L:
        raise ValueError(f"benchmark L={L} must be a perfect square (h = w = sqrt(L))")
    return Tensor(rng.standard_normal((1, d_model, side, side)).astype(np.float32))


def bench_ss2d(L: int, d_model: int = 32, d_state: int = 8,
               repeats: int = 5, seed: int = 0) -> BenchRow:
    rng = np.random.default_rng(seed)
    x = _square_map(L, d_model, rng)
    p = ScanParams.create(d_model, d_state=d_state, rng=rng, dtype=np.float32)

    def fn():
        with T.no_grad():
            ss2d(x, p)

    mean_ns, p95_ns = time_fn(fn, repeats)
    return BenchRow("ss2d", L, d_model, d_state, mean_ns, p95_ns)


def naive_attention(x: np.ndarray) -> np.ndarray:
    """Quadratic baseline: softmax(x x^T / sqrt(d)) x over L tokens."""
    scores = x @ x.transpose(0, 2, 1) / math.sqrt(x.shape[-1])
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ x


def bench_attention(L: int, d_model: int = 32, repeats: int = 5, seed: int = 0) -> BenchRow:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, L, d_model)).astype(np.float32)
    mean_ns, p95_ns = time_fn(lambda: naive_attention(x), repeats)
    return BenchRow("attention", L, d_model, 0, mean_ns, p95_ns)


def run_sweep(op: str, Ls=(256, 1024, 4096), d_model: int = 32, d_state: int = 8,
              repeats: int = 5, seed: int = 0) -> list[BenchRow]:
    if op == "ss2d":
        return [bench_ss2d(L, d_model, d_state, repeats, seed) for L in Ls]
    if op == "attention":
        return [bench_attention(L, d_model, repeats, seed) for L in Ls]
    raise ValueError(f"unknown benchmark operator {op!r}; expected ss2d or attention")


def growth_ratios(rows: list[BenchRow]) -> list[float]:
    """mean_ns ratios between consecutive sweep points."""
    return [rows[i + 1].mean_ns / rows[i].mean_ns for i in range(len(rows) - 1)]


def write_bench_csv(path, rows: list[BenchRow]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["operator", "L", "d_model", "d_state", "mean_ns", "p95_ns"])
        for r in rows:
            w.writerow([r.operator, r.L, r.d_model, r.d_state, int(r.mean_ns), int(r.p95_ns)])
