"""Autoscaling policies and policy curation.

All decisions are emitted as coordinated (prefill, decode) target pairs: decode
is the anchor role and the prefill target is ceil(anchor * pd_ratio), so the
two pools always move together through one decision.

Three policy kinds:

* proportional — expected = current * metric / target, with a hysteresis band
  (scale out above 1 + out_threshold, in below 1 - in_threshold) and
  direction-matched cooldowns;
* feedback — tiered multipliers on a latency metric (strong/mild scale-out
  above breach ratios, gentle scale-in below a relax ratio), same cooldowns;
* periodic — a wall-clock schedule of static target pairs covering the day.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Sequence

from .errors import GapInSchedule, InvalidConfig, InvalidInput, NoFeasibleRatio
from .servicesim import (
    LATENCY_METRICS,
    LEVEL_METRICS,
    METRIC_NAMES,
    RATE_METRICS,
    ServiceProfile,
    make_reference_instances,
    step_metrics,
)
from .workload import WorkloadTrace, demand_at, peak_tick

if TYPE_CHECKING:  # pragma: no cover - import cycle guard, driver imports policy
    from .driver import RunConfig

DAY_SECONDS = 86400


class PolicyKind(str, enum.Enum):
    PROPORTIONAL = "proportional"
    FEEDBACK = "feedback"
    PERIODIC = "periodic"


class ScaleAction(str, enum.Enum):
    SCALE_OUT = "scale_out"
    SCALE_IN = "scale_in"
    NO_CHANGE = "no_change"


@dataclass(frozen=True)
class ScheduleInterval:
    """Half-open [start_s, end_s) window of seconds-of-day with fixed targets."""

    start_s: int
    end_s: int
    prefill: int
    decode: int


@dataclass(frozen=True)
class ScalingDecision:
    action: ScaleAction
    target_prefill: int
    target_decode: int
    cause: str


def parse_ratio(text: str | float | int) -> float:
    """Parse a prefill:decode ratio; accepts "P:D" strings or a bare number."""
    if isinstance(text, (int, float)):
        value = float(text)
    else:
        parts = text.split(":")
        if len(parts) != 2:
            raise InvalidConfig(f"pd_ratio must look like 'P:D', got {text!r}")
        try:
            p, d = float(parts[0]), float(parts[1])
        except ValueError:
            raise InvalidConfig(f"pd_ratio must be numeric, got {text!r}") from None
        if p <= 0 or d <= 0:
            raise InvalidConfig("pd_ratio terms must be > 0")
        value = p / d
    if value <= 0 or not math.isfinite(value):
        raise InvalidConfig("pd_ratio must be a positive finite number")
    return value


def format_ratio(ratio: float) -> str:
    if ratio >= 1:
        return f"{ratio:g}:1"
    return f"1:{1.0 / ratio:g}"


@dataclass(frozen=True)
class PolicyConfig:
    name: str = "policy"
    kind: PolicyKind = PolicyKind.PROPORTIONAL
    metric: str = "decode_tps"
    target_per_instance: float | None = None
    scale_out_threshold: float = 0.1
    scale_in_threshold: float = 0.1
    cooldown_out: int = 5
    cooldown_in: int = 10
    latency_target: float | None = None
    breach_major: float = 1.25
    breach_minor: float = 1.1
    relax_below: float = 0.95
    factor_major: float = 1.2
    factor_minor: float = 1.1
    factor_in: float = 0.95
    pd_ratio: float = 0.5
    min_prefill: int = 1
    max_prefill: int = 10_000
    min_decode: int = 1
    max_decode: int = 10_000
    dampening: float = 1.0
    smoothing_window: int = 3
    schedule: tuple[ScheduleInterval, ...] = ()

    def __post_init__(self) -> None:
        if self.pd_ratio <= 0:
            raise InvalidConfig("pd_ratio must be > 0")
        if not (0 <= self.min_prefill <= self.max_prefill):
            raise InvalidConfig("need 0 <= min_prefill <= max_prefill")
        if not (0 <= self.min_decode <= self.max_decode):
            raise InvalidConfig("need 0 <= min_decode <= max_decode")
        if not 0.0 < self.dampening <= 1.0:
            raise InvalidConfig("dampening must be in (0, 1]")
        if self.cooldown_out < 0 or self.cooldown_in < 0:
            raise InvalidConfig("cooldowns must be >= 0")
        if self.smoothing_window < 1:
            raise InvalidConfig("smoothing_window must be >= 1")
        if self.kind is PolicyKind.PROPORTIONAL:
            if self.metric not in RATE_METRICS | LEVEL_METRICS:
                raise InvalidConfig(
                    f"proportional policies need a throughput or utilization metric, got {self.metric!r}"
                )
            if self.target_per_instance is None or self.target_per_instance <= 0:
                raise InvalidConfig("proportional policies need target_per_instance > 0")
            if self.scale_out_threshold <= 0 or self.scale_in_threshold <= 0:
                raise InvalidConfig("hysteresis thresholds must be > 0")
        elif self.kind is PolicyKind.FEEDBACK:
            if self.metric not in LATENCY_METRICS:
                raise InvalidConfig(f"feedback policies need a latency metric, got {self.metric!r}")
            if self.latency_target is None or self.latency_target <= 0:
                raise InvalidConfig("feedback policies need latency_target > 0")
            if not (self.breach_major > self.breach_minor > 1.0 > self.relax_below > 0.0):
                raise InvalidConfig("need breach_major > breach_minor > 1 > relax_below > 0")
            if self.factor_major <= 1.0 or self.factor_minor <= 1.0 or not 0.0 < self.factor_in < 1.0:
                raise InvalidConfig("scale-out factors must be > 1 and the scale-in factor in (0, 1)")
        elif self.kind is PolicyKind.PERIODIC:
            validate_schedule(self.schedule)
        if self.metric not in METRIC_NAMES:
            raise InvalidConfig(f"unknown metric {self.metric!r}")


def validate_schedule(schedule: Sequence[ScheduleInterval]) -> None:
    """A schedule must partition [00:00, 24:00) with ordered, contiguous intervals."""
    if not schedule:
        raise GapInSchedule("periodic policies need a non-empty schedule")
    intervals = sorted(schedule, key=lambda iv: iv.start_s)
    if intervals[0].start_s != 0:
        raise GapInSchedule("schedule must start at 00:00")
    for iv in intervals:
        if not (0 <= iv.start_s < iv.end_s <= DAY_SECONDS):
            raise GapInSchedule(f"bad interval [{iv.start_s}, {iv.end_s})")
        if iv.prefill < 0 or iv.decode < 0:
            raise InvalidConfig("schedule targets must be >= 0")
    for prev, cur in zip(intervals, intervals[1:]):
        if cur.start_s != prev.end_s:
            raise GapInSchedule(
                f"gap or overlap between {prev.end_s}s and {cur.start_s}s"
            )
    if intervals[-1].end_s != DAY_SECONDS:
        raise GapInSchedule("schedule must cover through 24:00")


def parse_interval(text: str, prefill: int, decode: int) -> ScheduleInterval:
    """Parse "HH:MM-HH:MM" (24:00 allowed as an end time) into an interval."""
    try:
        start_text, end_text = text.split("-")
        start = _seconds_of_day(start_text)
        end = _seconds_of_day(end_text, allow_midnight_end=True)
    except ValueError as exc:
        raise InvalidConfig(f"bad schedule interval {text!r}: {exc}") from None
    return ScheduleInterval(start_s=start, end_s=end, prefill=prefill, decode=decode)


def _seconds_of_day(text: str, allow_midnight_end: bool = False) -> int:
    hh, mm = text.strip().split(":")
    hours, minutes = int(hh), int(mm)
    if hours == 24 and minutes == 0 and allow_midnight_end:
        return DAY_SECONDS
    if not (0 <= hours < 24 and 0 <= minutes < 60):
        raise ValueError(f"bad time {text!r}")
    return hours * 3600 + minutes * 60


def apply_pd_ratio(anchor_decode: int, cfg: PolicyConfig) -> tuple[int, int]:
    """Derive the coordinated (prefill, decode) pair from a decode anchor.

    Decode is clamped to its bounds first; prefill = ceil(decode * pd_ratio),
    then clamped to its own bounds.
    """
    decode = max(cfg.min_decode, min(cfg.max_decode, anchor_decode))
    prefill = math.ceil(decode * cfg.pd_ratio - 1e-12)
    prefill = max(cfg.min_prefill, min(cfg.max_prefill, prefill))
    return (prefill, decode)


def proportional_decide(
    cfg: PolicyConfig, current: int, metric_value: float, last_action_tick: int, now: int
) -> ScalingDecision:
    """Proportional tracking on the decode anchor.

    ``metric_value`` is the smoothed per-instance observation for rate metrics
    and the smoothed level for utilization metrics; the expected count is
    current * metric_value / target, with hysteresis and cooldown gates.
    """
    if current < 1:
        expected = cfg.min_decode if metric_value > 0 else 0
        return _decide_from_expected(cfg, max(current, 1), float(max(expected, 1)), last_action_tick, now, "bootstrap")
    target = cfg.target_per_instance or 1.0
    expected = current * (metric_value / target)
    cause = f"{cfg.metric}={metric_value:.6g} target={target:.6g}"
    return _decide_from_expected(cfg, current, expected, last_action_tick, now, cause)


def _decide_from_expected(
    cfg: PolicyConfig, current: int, expected: float, last_action_tick: int, now: int, cause: str
) -> ScalingDecision:
    ratio = expected / current
    cooled = now - last_action_tick
    if ratio > 1.0 + cfg.scale_out_threshold and cooled >= cfg.cooldown_out:
        anchor = max(math.ceil(expected - 1e-12), current + 1)
        prefill, decode = apply_pd_ratio(anchor, cfg)
        if decode > current:
            return ScalingDecision(ScaleAction.SCALE_OUT, prefill, decode, cause)
    elif ratio < 1.0 - cfg.scale_in_threshold and cooled >= cfg.cooldown_in:
        anchor = min(math.floor(expected + 1e-12), current - 1)
        prefill, decode = apply_pd_ratio(anchor, cfg)
        if decode < current:
            return ScalingDecision(ScaleAction.SCALE_IN, prefill, decode, cause)
    prefill, decode = apply_pd_ratio(current, cfg)
    return ScalingDecision(ScaleAction.NO_CHANGE, prefill, decode, cause)


def feedback_decide(
    cfg: PolicyConfig, current: int, latency: float, last_action_tick: int, now: int
) -> ScalingDecision:
    """Tiered negative feedback on a latency metric.

    latency >= target*breach_major  -> count * factor_major (strong scale-out)
    latency >= target*breach_minor  -> count * factor_minor (mild scale-out)
    latency <= target*relax_below   -> count * factor_in    (gentle scale-in)
    Scale-out is gated on cooldown_out, scale-in on cooldown_in.
    """
    target = cfg.latency_target or 0.0
    cooled = now - last_action_tick
    cause = f"{cfg.metric}={latency:.6g} target={target:.6g}"
    current = max(current, 1)
    if latency >= target * cfg.breach_major:
        factor, action = cfg.factor_major, ScaleAction.SCALE_OUT
    elif latency >= target * cfg.breach_minor:
        factor, action = cfg.factor_minor, ScaleAction.SCALE_OUT
    elif latency <= target * cfg.relax_below:
        factor, action = cfg.factor_in, ScaleAction.SCALE_IN
    else:
        prefill, decode = apply_pd_ratio(current, cfg)
        return ScalingDecision(ScaleAction.NO_CHANGE, prefill, decode, cause)

    if action is ScaleAction.SCALE_OUT:
        if cooled < cfg.cooldown_out:
            prefill, decode = apply_pd_ratio(current, cfg)
            return ScalingDecision(ScaleAction.NO_CHANGE, prefill, decode, cause + " cooling")
        anchor = max(math.ceil(current * factor - 1e-12), current + 1)
    else:
        if cooled < cfg.cooldown_in:
            prefill, decode = apply_pd_ratio(current, cfg)
            return ScalingDecision(ScaleAction.NO_CHANGE, prefill, decode, cause + " cooling")
        anchor = min(math.floor(current * factor + 1e-12), current - 1)
    prefill, decode = apply_pd_ratio(anchor, cfg)
    if decode == current:
        return ScalingDecision(ScaleAction.NO_CHANGE, prefill, decode, cause + " clamped")
    return ScalingDecision(action, prefill, decode, cause)


def periodic_decide(
    schedule: Sequence[ScheduleInterval], now_s: int, current_prefill: int, current_decode: int
) -> ScalingDecision:
    """Return the active interval's static targets; NoChange when already there."""
    second = now_s % DAY_SECONDS
    for iv in schedule:
        if iv.start_s <= second < iv.end_s:
            cause = f"schedule {iv.start_s // 3600:02d}:{iv.start_s % 3600 // 60:02d}"
            if (iv.prefill, iv.decode) == (current_prefill, current_decode):
                return ScalingDecision(ScaleAction.NO_CHANGE, iv.prefill, iv.decode, cause)
            total_now = current_prefill + current_decode
            action = ScaleAction.SCALE_OUT if iv.prefill + iv.decode > total_now else ScaleAction.SCALE_IN
            return ScalingDecision(action, iv.prefill, iv.decode, cause)
    raise GapInSchedule(f"no schedule interval covers second-of-day {second}")


@dataclass(frozen=True)
class ActionRecord:
    tick: int
    action: ScaleAction


def anti_flap_filter(
    decision: ScalingDecision,
    history: Sequence[ActionRecord],
    cfg: PolicyConfig,
    now: int,
    current_prefill: int,
    current_decode: int,
) -> ScalingDecision:
    """Suppress flapping and dampen deltas.

    An action is suppressed while the opposite direction acted within this
    direction's cooldown window. Surviving deltas are scaled by the dampening
    factor on the decode anchor and the pair re-derived so the ratio holds.
    """
    if decision.action is ScaleAction.NO_CHANGE:
        return decision
    window = cfg.cooldown_in if decision.action is ScaleAction.SCALE_IN else cfg.cooldown_out
    opposite = (
        ScaleAction.SCALE_OUT if decision.action is ScaleAction.SCALE_IN else ScaleAction.SCALE_IN
    )
    for rec in reversed(history):
        if rec.action is opposite:
            if now - rec.tick < window:
                return ScalingDecision(
                    ScaleAction.NO_CHANGE,
                    current_prefill,
                    current_decode,
                    decision.cause + " suppressed:anti-flap",
                )
            break
    if cfg.dampening >= 1.0:
        return decision
    delta = decision.target_decode - current_decode
    damped = int(math.copysign(math.floor(abs(delta) * cfg.dampening + 0.5), delta))
    if damped == 0:
        return ScalingDecision(
            ScaleAction.NO_CHANGE,
            current_prefill,
            current_decode,
            decision.cause + " suppressed:dampened",
        )
    prefill, decode = apply_pd_ratio(current_decode + damped, cfg)
    if decode == current_decode:
        return ScalingDecision(
            ScaleAction.NO_CHANGE, current_prefill, current_decode, decision.cause + " suppressed:dampened"
        )
    return ScalingDecision(decision.action, prefill, decode, decision.cause + " dampened")


# -- pressure test -----------------------------------------------------------

DEFAULT_RATIO_GRID = ("1:5", "1:3", "1:2", "1:1", "2:1", "3:1", "5:1", "9:1")


@dataclass(frozen=True)
class RatioPoint:
    """One grid point of a P/D ratio sweep at a fixed GPU budget."""

    ratio_label: str
    ratio: float
    prefill: int
    decode: int
    max_scale: float
    served_tps: float
    decode_tps_per_instance: float
    feasible: bool
    breach: str  # "", "ttft", or "tbt" at the trace peak


def sweep_pd_ratios(
    profile: ServiceProfile,
    workload: WorkloadTrace,
    gpu_budget: int,
    ratio_grid: Sequence[str | float] = DEFAULT_RATIO_GRID,
    *,
    scale_tolerance: float = 1e-4,
) -> list[RatioPoint]:
    """Sweep the ratio grid at a fixed GPU budget against the trace peak.

    For each ratio the largest instance pair within budget is provisioned and
    the peak-tick demand scaled up by bisection to the largest multiple that
    still meets both latency SLOs. The served token rate at that operating
    point is the grid score; a ratio is feasible when the scale covers the
    actual peak (scale >= 1).
    """
    if gpu_budget < profile.gpus_per_prefill_instance + profile.gpus_per_decode_instance:
        raise InvalidInput("GPU budget cannot fit even one instance per role")
    if not ratio_grid:
        raise InvalidInput("ratio grid must be non-empty")

    peak = workload.points[peak_tick(workload)]
    peak_demand = demand_at(workload, peak.t)
    points: list[RatioPoint] = []
    for entry in ratio_grid:
        label = entry if isinstance(entry, str) else format_ratio(float(entry))
        ratio = parse_ratio(entry)
        counts = _max_counts_within_budget(profile, gpu_budget, ratio)
        if counts is None:
            points.append(RatioPoint(label, ratio, 0, 0, 0.0, 0.0, 0.0, False, "budget"))
            continue
        prefill, decode = counts
        fleet = make_reference_instances(prefill, decode, profile=profile)

        def slo_ok(scale: float) -> bool:
            sample = step_metrics(
                profile,
                (peak_demand[0] * scale, peak_demand[1] * scale),
                fleet,
                kv_hit_rate=peak.kv_cache_hit_rate,
            )
            return sample.ttft <= profile.slo_ttft and sample.tbt <= profile.slo_tbt

        max_scale = _bisect_max_scale(slo_ok, peak_demand, profile, prefill, decode, scale_tolerance)
        operating = (peak_demand[0] * max_scale, peak_demand[1] * max_scale)
        sample = step_metrics(profile, operating, fleet, kv_hit_rate=peak.kv_cache_hit_rate)
        served = sample.cache_missed_prefill_tps + sample.decode_tps
        feasible = max_scale >= 1.0
        breach = ""
        if not feasible:
            at_peak = step_metrics(profile, peak_demand, fleet, kv_hit_rate=peak.kv_cache_hit_rate)
            if at_peak.ttft > profile.slo_ttft:
                breach = "ttft"
            elif at_peak.tbt > profile.slo_tbt:
                breach = "tbt"
        points.append(
            RatioPoint(
                ratio_label=label,
                ratio=ratio,
                prefill=prefill,
                decode=decode,
                max_scale=max_scale,
                served_tps=served,
                decode_tps_per_instance=sample.decode_tps / decode if decode else 0.0,
                feasible=feasible,
                breach=breach,
            )
        )
    return points


def _max_counts_within_budget(
    profile: ServiceProfile, gpu_budget: int, ratio: float
) -> tuple[int, int] | None:
    g_p, g_d = profile.gpus_per_prefill_instance, profile.gpus_per_decode_instance
    best: tuple[int, int] | None = None
    decode = 1
    while True:
        prefill = max(1, math.ceil(decode * ratio - 1e-12))
        if prefill * g_p + decode * g_d > gpu_budget:
            break
        best = (prefill, decode)
        decode += 1
    return best


def _bisect_max_scale(slo_ok, peak_demand, profile, prefill, decode, tol) -> float:
    cap_p = prefill * profile.prefill_capacity
    cap_d = decode * profile.decode_capacity
    hi_cap = max(
        cap_p / peak_demand[0] if peak_demand[0] > 0 else 0.0,
        cap_d / peak_demand[1] if peak_demand[1] > 0 else 0.0,
    )
    if hi_cap <= 0:
        return math.inf  # no demand at all: any scale is fine
    hi = hi_cap * 1.05
    if slo_ok(hi):
        return hi
    lo = 0.0
    while hi - lo > tol * max(1.0, hi_cap):
        mid = (lo + hi) / 2.0
        if slo_ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def pressure_test(
    profile: ServiceProfile,
    workload: WorkloadTrace,
    *,
    gpu_budget: int,
    ratio_grid: Sequence[str | float] = DEFAULT_RATIO_GRID,
) -> tuple[float, float]:
    """Find (r_opt, m_hat): the throughput-optimal feasible P/D ratio and the
    per-decode-instance token rate observed at its SLO-limited operating point.

    Raises :class:`NoFeasibleRatio` when no grid ratio covers the trace peak
    within both SLOs.
    """
    points = sweep_pd_ratios(profile, workload, gpu_budget, ratio_grid)
    feasible = [pt for pt in points if pt.feasible]
    if not feasible:
        raise NoFeasibleRatio(
            "no ratio on the grid meets both SLOs at peak load; "
            + "; ".join(f"{pt.ratio_label}->{pt.breach or 'infeasible'}" for pt in points)
        )
    best = max(feasible, key=lambda pt: (pt.served_tps, -pt.ratio))
    return (best.ratio, best.decode_tps_per_instance)


# -- curation ----------------------------------------------------------------


@dataclass(frozen=True)
class CandidateScore:
    policy_name: str
    feasible: bool
    slo_violation_fraction: float
    served_tokens: float
    gpu_hours: float
    score: float  # served tokens per GPU-hour when feasible

    def rank_key(self) -> tuple[int, float, str]:
        # Feasible candidates always outrank infeasible ones; among infeasible,
        # lower violation wins. Name breaks exact ties deterministically.
        if self.feasible:
            return (1, self.score, self.policy_name)
        return (0, -self.slo_violation_fraction, self.policy_name)


@dataclass(frozen=True)
class CurationResult:
    p_opt: str
    r_opt: float
    m_hat: float
    scores: tuple[CandidateScore, ...]


def curate_policy(
    config: "RunConfig",
    candidates: Sequence[PolicyConfig] | None = None,
    *,
    slo_violation_budget: float = 0.01,
) -> CurationResult:
    """Select the best autoscaling policy for a service (two-stage).

    Stage one pressure-tests the ratio grid to fix (r_opt, m_hat). Stage two
    replays the full workload once per candidate policy — each re-based onto
    r_opt, with m_hat as the default per-instance target — and scores served
    tokens per GPU-hour subject to the SLO-violation budget. Deterministic for
    a fixed config seed.
    """
    from .driver import run_simulation  # local import; driver depends on policy

    service = config.primary_service()
    trace = config.resolve_trace()
    pool = list(candidates) if candidates is not None else list(config.candidate_policies)
    if not pool:
        pool = [service.policy]

    r_opt, m_hat = pressure_test(
        service.profile,
        trace,
        gpu_budget=config.pressure_gpu_budget(),
        ratio_grid=config.ratio_grid,
    )

    scores: list[CandidateScore] = []
    for cand in pool:
        tuned = _rebased_candidate(cand, r_opt, m_hat)
        variant = config.with_policy(service.name, tuned)
        report = run_simulation(variant)
        summary = report.services[service.name].summary
        served = summary.served_prefill_tokens + summary.served_decode_tokens
        feasible = summary.slo_violation_fraction <= slo_violation_budget
        score = served / summary.gpu_hours if summary.gpu_hours > 0 else 0.0
        scores.append(
            CandidateScore(
                policy_name=cand.name,
                feasible=feasible,
                slo_violation_fraction=summary.slo_violation_fraction,
                served_tokens=served,
                gpu_hours=summary.gpu_hours,
                score=score,
            )
        )
    best = max(scores, key=lambda s: s.rank_key())
    return CurationResult(p_opt=best.policy_name, r_opt=r_opt, m_hat=m_hat, scores=tuple(scores))


def _rebased_candidate(cand: PolicyConfig, r_opt: float, m_hat: float) -> PolicyConfig:
    updates: dict = {"pd_ratio": r_opt}
    if cand.kind is PolicyKind.PROPORTIONAL and cand.target_per_instance is None:
        if cand.metric in RATE_METRICS:
            updates["target_per_instance"] = m_hat
        else:
            updates["target_per_instance"] = 0.8
    return replace(cand, **updates)
