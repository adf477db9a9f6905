"""Workload traces: diurnal generation, file round-trip, and token-demand conversion.

A trace is a sequence of per-tick request mixes. Token demand derives from it as

* prefill token rate = arrival_rate * mean_input_len * (1 - kv_cache_hit_rate)
  (only cache-missed tokens need prefill compute), and
* decode token rate = arrival_rate * mean_output_len.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInput, InvalidShape, OutOfRange, ParseError, RangeError

TRACE_FILE_FIELDS = ("t", "arrival_rate", "mean_input_len", "mean_output_len", "kv_cache_hit_rate")


@dataclass(frozen=True)
class TracePoint:
    t: int
    arrival_rate: float
    mean_input_len: float
    mean_output_len: float
    kv_cache_hit_rate: float

    def __post_init__(self) -> None:
        if self.arrival_rate < 0:
            raise InvalidInput(f"t={self.t}: arrival_rate must be >= 0")
        if self.mean_input_len <= 0 or self.mean_output_len <= 0:
            raise InvalidInput(f"t={self.t}: token lengths must be > 0")
        if not 0.0 <= self.kv_cache_hit_rate <= 1.0:
            raise InvalidInput(f"t={self.t}: kv_cache_hit_rate must be within [0, 1]")


@dataclass(frozen=True)
class WorkloadTrace:
    points: tuple[TracePoint, ...]
    tick_seconds: float = 60.0

    def __post_init__(self) -> None:
        if not self.points:
            raise InvalidInput("a trace needs at least one point")
        if self.tick_seconds <= 0:
            raise InvalidInput("tick_seconds must be > 0")
        for i, p in enumerate(self.points):
            if p.t != i:
                raise InvalidInput(f"trace ticks must be consecutive from 0, found t={p.t} at index {i}")

    def __len__(self) -> int:
        return len(self.points)


def demand_at(trace: WorkloadTrace, t: int) -> tuple[float, float]:
    """Token demand (prefill_rate, decode_rate) at tick ``t``.

    The prefill rate counts cache-missed input tokens only.
    """
    if not 0 <= t < len(trace.points):
        raise OutOfRange(f"tick {t} outside trace [0, {len(trace.points) - 1}]")
    p = trace.points[t]
    prefill = p.arrival_rate * p.mean_input_len * (1.0 - p.kv_cache_hit_rate)
    decode = p.arrival_rate * p.mean_output_len
    return (prefill, decode)


def gen_diurnal_trace(
    duration_ticks: int,
    base_rate: float,
    peak_rate: float,
    peak_times: Sequence[int],
    noise_seed: int | None = None,
    *,
    peak_width: float = 90.0,
    noise_amplitude: float = 0.0,
    mean_input_len: float = 3000.0,
    mean_output_len: float = 350.0,
    kv_cache_hit_rate: float = 0.0,
    hit_rate_jitter: float = 0.0,
    tick_seconds: float = 60.0,
) -> WorkloadTrace:
    """Generate a two-peak (or n-peak) diurnal arrival curve.

    The analytic curve is Gaussian bumps over a base level:
    ``rate(t) = base + (peak - base) * sum_i exp(-(t - p_i)^2 / (2 w^2))``.
    Multiplicative noise of relative amplitude ``noise_amplitude`` is applied and
    the result floored at ``base_rate``, so the base level is a hard floor and
    amplitude 0 reproduces the analytic curve exactly. ``hit_rate_jitter`` adds
    seeded noise to the cache-hit rate (clipped to [0, 1]); arrival and hit-rate
    noise streams are independent draws from the same generator.
    """
    if duration_ticks < 1:
        raise InvalidShape("duration_ticks must be >= 1")
    if base_rate < 0 or peak_rate < base_rate:
        raise InvalidShape("need 0 <= base_rate <= peak_rate")
    if peak_width <= 0:
        raise InvalidShape("peak_width must be > 0")
    for p in peak_times:
        if not 0 <= p < duration_ticks:
            raise InvalidShape(f"peak time {p} outside [0, {duration_ticks})")

    ticks = np.arange(duration_ticks, dtype=float)
    curve = np.full(duration_ticks, float(base_rate))
    for p in peak_times:
        curve += (peak_rate - base_rate) * np.exp(-((ticks - p) ** 2) / (2.0 * peak_width**2))

    rng = np.random.default_rng(noise_seed)
    if noise_amplitude > 0:
        curve = curve * (1.0 + noise_amplitude * rng.standard_normal(duration_ticks))
    curve = np.maximum(curve, base_rate)

    hits = np.full(duration_ticks, float(kv_cache_hit_rate))
    if hit_rate_jitter > 0:
        hits = np.clip(hits + hit_rate_jitter * rng.standard_normal(duration_ticks), 0.0, 1.0)

    points = tuple(
        TracePoint(
            t=i,
            arrival_rate=float(curve[i]),
            mean_input_len=float(mean_input_len),
            mean_output_len=float(mean_output_len),
            kv_cache_hit_rate=float(hits[i]),
        )
        for i in range(duration_ticks)
    )
    return WorkloadTrace(points=points, tick_seconds=tick_seconds)


def load_trace(path: str, tick_seconds: float = 60.0) -> WorkloadTrace:
    """Read a trace CSV with the exact header ``t,arrival_rate,...,kv_cache_hit_rate``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty trace file", 1) from None
        if tuple(h.strip() for h in header) != TRACE_FILE_FIELDS:
            raise ParseError(
                f"header must be {','.join(TRACE_FILE_FIELDS)!r}, got {','.join(header)!r}", 1
            )
        points: list[TracePoint] = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(TRACE_FILE_FIELDS):
                raise ParseError(f"expected {len(TRACE_FILE_FIELDS)} fields, got {len(row)}", lineno)
            try:
                t = int(row[0])
                values = [float(cell) for cell in row[1:]]
            except ValueError:
                raise ParseError(f"malformed record {row!r}", lineno) from None
            arrival, in_len, out_len, hit = values
            if arrival < 0:
                raise RangeError("arrival_rate", f"must be >= 0, got {arrival}", lineno)
            if in_len <= 0:
                raise RangeError("mean_input_len", f"must be > 0, got {in_len}", lineno)
            if out_len <= 0:
                raise RangeError("mean_output_len", f"must be > 0, got {out_len}", lineno)
            if not 0.0 <= hit <= 1.0:
                raise RangeError("kv_cache_hit_rate", f"must be within [0, 1], got {hit}", lineno)
            points.append(TracePoint(t, arrival, in_len, out_len, hit))
    if not points:
        raise ParseError("trace file has a header but no records", 2)
    try:
        return WorkloadTrace(points=tuple(points), tick_seconds=tick_seconds)
    except InvalidInput as exc:
        raise ParseError(str(exc), 2) from None


def save_trace(trace: WorkloadTrace, path: str) -> None:
    """Write a trace CSV; floats use shortest-exact repr so a round-trip is lossless."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_FILE_FIELDS)
        for p in trace.points:
            writer.writerow(
                [p.t, repr(p.arrival_rate), repr(p.mean_input_len), repr(p.mean_output_len), repr(p.kv_cache_hit_rate)]
            )


def peak_tick(trace: WorkloadTrace) -> int:
    """Tick with the highest decode token demand (ties: earliest)."""
    best_t = 0
    best = -1.0
    for p in trace.points:
        d = p.arrival_rate * p.mean_output_len
        if d > best:
            best, best_t = d, p.t
    return best_t


def trace_points(trace: WorkloadTrace) -> Iterable[TracePoint]:
    return iter(trace.points)
