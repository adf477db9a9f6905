from __future__ import annotations

import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetscale.errors import GapInSchedule, InvalidConfig, InvalidInput, NoFeasibleRatio
from hetscale.policy import (
    DEFAULT_RATIO_GRID,
    ActionRecord,
    CandidateScore,
    PolicyConfig,
    PolicyKind,
    ScaleAction,
    ScalingDecision,
    ScheduleInterval,
    anti_flap_filter,
    apply_pd_ratio,
    feedback_decide,
    format_ratio,
    parse_interval,
    parse_ratio,
    periodic_decide,
    pressure_test,
    proportional_decide,
    sweep_pd_ratios,
    validate_schedule,
)
from hetscale.servicesim import ServiceProfile
from hetscale.workload import TracePoint, WorkloadTrace

WIDE = dict(min_prefill=0, max_prefill=10_000, min_decode=0, max_decode=10_000)


def prop_cfg(**kw):
    base = dict(
        name="prop",
        kind=PolicyKind.PROPORTIONAL,
        metric="decode_tps",
        target_per_instance=100.0,
        pd_ratio=0.5,
        min_prefill=1,
        min_decode=1,
        max_prefill=10_000,
        max_decode=10_000,
    )
    base.update(kw)
    return PolicyConfig(**base)


def fb_cfg(**kw):
    base = dict(
        name="fb",
        kind=PolicyKind.FEEDBACK,
        metric="ttft",
        latency_target=1.0,
        pd_ratio=0.5,
        min_prefill=1,
        min_decode=1,
        max_prefill=10_000,
        max_decode=10_000,
    )
    base.update(kw)
    return PolicyConfig(**base)


def flat_trace(arrival, in_len=3000.0, out_len=350.0, hit=0.0, n=3):
    return WorkloadTrace(
        points=tuple(TracePoint(i, arrival, in_len, out_len, hit) for i in range(n))
    )


PT_PROFILE = ServiceProfile(
    prefill_capacity=12000.0,
    decode_capacity=1400.0,
    ttft_base=0.4,
    tbt_base=0.03,
    slo_ttft=2.0,
    slo_tbt=0.1,
    gpus_per_prefill_instance=8,
    gpus_per_decode_instance=8,
)


# --- ratio parsing and pairing ----------------------------------------------


def test_parse_ratio_forms():
    assert parse_ratio("1:3") == pytest.approx(1 / 3)
    assert parse_ratio("3:1") == pytest.approx(3.0)
    assert parse_ratio("2:4") == pytest.approx(0.5)
    assert parse_ratio(0.25) == 0.25
    assert parse_ratio(2) == 2.0


def test_parse_ratio_rejects_garbage():
    for bad in ("1:0", "0:3", "-1:2", "a:b", "1:2:3", "", -0.5, 0.0, math.inf):
        with pytest.raises(InvalidConfig):
            parse_ratio(bad)


def test_format_ratio_round_trips_grid():
    for label in DEFAULT_RATIO_GRID:
        r = parse_ratio(label)
        assert parse_ratio(format_ratio(r)) == pytest.approx(r)


def test_apply_pd_ratio_known_pairs():
    cfg = prop_cfg(pd_ratio=parse_ratio("1:3"))
    assert apply_pd_ratio(3, cfg) == (1, 3)
    assert apply_pd_ratio(4, cfg) == (2, 4)  # ceil(4/3)
    assert apply_pd_ratio(6, cfg) == (2, 6)
    cfg2 = prop_cfg(pd_ratio=parse_ratio("3:1"))
    assert apply_pd_ratio(2, cfg2) == (6, 2)


def test_apply_pd_ratio_clamps_both_roles():
    cfg = prop_cfg(pd_ratio=2.0, min_decode=2, max_decode=8, min_prefill=3, max_prefill=10)
    assert apply_pd_ratio(0, cfg) == (4, 2)  # decode raised to min first
    assert apply_pd_ratio(20, cfg) == (10, 8)  # 16 prefill capped at 10
    assert apply_pd_ratio(5, cfg) == (10, 5)


@settings(max_examples=120, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 60))
def test_apply_pd_ratio_matches_exact_fraction_oracle(p, q, d):
    # prefill must be the exact ceiling of d*p/q, computed here in integers
    cfg = prop_cfg(pd_ratio=p / q, **WIDE)
    prefill, decode = apply_pd_ratio(d, cfg)
    assert decode == d
    assert prefill == math.ceil(Fraction(p, q) * d)


# --- proportional control ---------------------------------------------------


def test_worked_example_ten_instances_at_120_of_target():
    # 10 instances observing 120 tok/s each against a 100 tok/s target:
    # expected count 12, well past the +10% band, so scale out to (6, 12).
    cfg = prop_cfg()
    decision = proportional_decide(cfg, 10, 120.0, -1000, 0)
    assert decision.action is ScaleAction.SCALE_OUT
    assert (decision.target_prefill, decision.target_decode) == (6, 12)


def test_proportional_hand_table():
    # current=10, target=100, +-10% band: expected = value / 10
    cfg = prop_cfg()
    cases = [
        (125.0, ScaleAction.SCALE_OUT, 13),  # ceil(12.5)
        (111.0, ScaleAction.SCALE_OUT, 12),  # ceil(11.1)
        (110.0, ScaleAction.NO_CHANGE, 10),  # ratio exactly 1.1 stays inside
        (95.0, ScaleAction.NO_CHANGE, 10),
        (90.0, ScaleAction.NO_CHANGE, 10),  # ratio exactly 0.9 stays inside
        (89.0, ScaleAction.SCALE_IN, 8),  # floor(8.9)
    ]
    for value, action, decode in cases:
        d = proportional_decide(cfg, 10, value, -1000, 50)
        assert d.action is action, f"value={value}"
        assert d.target_decode == decode, f"value={value}"


def test_scale_out_blocked_by_cooldown():
    cfg = prop_cfg(cooldown_out=5, cooldown_in=10)
    hot = proportional_decide(cfg, 10, 200.0, last_action_tick=8, now=12)
    assert hot.action is ScaleAction.NO_CHANGE
    ready = proportional_decide(cfg, 10, 200.0, last_action_tick=8, now=13)
    assert ready.action is ScaleAction.SCALE_OUT


def test_scale_in_blocked_by_its_own_longer_cooldown():
    cfg = prop_cfg(cooldown_out=5, cooldown_in=10)
    cold = proportional_decide(cfg, 10, 10.0, last_action_tick=5, now=14)
    assert cold.action is ScaleAction.NO_CHANGE
    ready = proportional_decide(cfg, 10, 10.0, last_action_tick=5, now=15)
    assert ready.action is ScaleAction.SCALE_IN


def test_scale_in_clamped_at_min_becomes_no_change():
    cfg = prop_cfg(min_decode=10)
    d = proportional_decide(cfg, 10, 10.0, -1000, 0)
    assert d.action is ScaleAction.NO_CHANGE
    assert d.target_decode == 10


def test_zero_current_bootstraps_to_minimum():
    cfg = prop_cfg(min_decode=2)
    d = proportional_decide(cfg, 0, 50.0, -1000, 0)
    assert d.target_decode >= 2


@settings(max_examples=150, deadline=None)
@given(st.floats(0.01, 3.0), st.integers(1, 40))
def test_hysteresis_band_property(ratio_value, current):
    cfg = prop_cfg(scale_out_threshold=0.15, scale_in_threshold=0.2, **WIDE)
    value = ratio_value * cfg.target_per_instance
    d = proportional_decide(cfg, current, value, -1000, 0)
    if d.action is ScaleAction.SCALE_OUT:
        assert ratio_value > 1.15
        assert d.target_decode > current
    elif d.action is ScaleAction.SCALE_IN:
        assert ratio_value < 0.8
        assert d.target_decode < current
    else:
        # inside the dead band nothing may move
        if 0.8 <= ratio_value <= 1.15:
            assert d.action is ScaleAction.NO_CHANGE
    # pair always respects the configured ratio
    expect_p = max(cfg.min_prefill, min(cfg.max_prefill, math.ceil(d.target_decode * cfg.pd_ratio - 1e-12)))
    assert d.target_prefill == expect_p


# --- feedback control -------------------------------------------------------


def test_feedback_tier_table():
    cfg = fb_cfg()  # target 1.0, tiers 1.25 / 1.1 / 0.95, factors 1.2 / 1.1 / 0.95
    cases = [
        (1.30, ScaleAction.SCALE_OUT, 12),  # 10 * 1.2
        (1.25, ScaleAction.SCALE_OUT, 12),
        (1.15, ScaleAction.SCALE_OUT, 11),  # 10 * 1.1
        (1.00, ScaleAction.NO_CHANGE, 10),
        (0.96, ScaleAction.NO_CHANGE, 10),
        (0.94, ScaleAction.SCALE_IN, 9),  # floor(10 * 0.95) = 9
    ]
    for latency, action, decode in cases:
        d = feedback_decide(cfg, 10, latency, -1000, 100)
        assert d.action is action, f"latency={latency}"
        assert d.target_decode == decode, f"latency={latency}"


def test_feedback_cooldowns_are_direction_matched():
    cfg = fb_cfg(cooldown_out=5, cooldown_in=10)
    # 6 ticks after the last action: out may fire again, in may not
    out = feedback_decide(cfg, 10, 2.0, last_action_tick=0, now=6)
    assert out.action is ScaleAction.SCALE_OUT
    inn = feedback_decide(cfg, 10, 0.5, last_action_tick=0, now=6)
    assert inn.action is ScaleAction.NO_CHANGE
    assert inn.cause.endswith("cooling")
    late = feedback_decide(cfg, 10, 0.5, last_action_tick=0, now=10)
    assert late.action is ScaleAction.SCALE_IN


def test_feedback_clamp_reports_no_change():
    cfg = fb_cfg(min_decode=1)
    d = feedback_decide(cfg, 1, 0.5, -1000, 0)
    assert d.action is ScaleAction.NO_CHANGE
    assert d.cause.endswith("clamped")


def test_feedback_small_fleet_still_steps_by_one():
    cfg = fb_cfg()
    d = feedback_decide(cfg, 2, 1.15, -1000, 0)  # 2 * 1.1 = 2.2 -> must still grow
    assert d.action is ScaleAction.SCALE_OUT
    assert d.target_decode == 3


def test_feedback_threshold_invariant_enforced():
    with pytest.raises(InvalidConfig):
        fb_cfg(breach_major=1.1, breach_minor=1.25)
    with pytest.raises(InvalidConfig):
        fb_cfg(relax_below=1.05)
    with pytest.raises(InvalidConfig):
        fb_cfg(factor_in=1.2)
    with pytest.raises(InvalidConfig):
        fb_cfg(metric="decode_tps")


def test_proportional_rejects_latency_metric():
    with pytest.raises(InvalidConfig):
        prop_cfg(metric="ttft")
    with pytest.raises(InvalidConfig):
        prop_cfg(target_per_instance=None)


# --- periodic schedules -----------------------------------------------------


def day_schedule():
    return (
        parse_interval("00:00-08:00", 2, 4),
        parse_interval("08:00-20:00", 6, 12),
        parse_interval("20:00-24:00", 3, 6),
    )


def test_parse_interval_and_validation():
    sched = day_schedule()
    validate_schedule(sched)
    assert sched[0] == ScheduleInterval(0, 8 * 3600, 2, 4)
    assert sched[2].end_s == 86400


def test_schedule_gap_detected():
    with pytest.raises(GapInSchedule):
        validate_schedule((
            parse_interval("00:00-08:00", 2, 4),
            parse_interval("09:00-24:00", 6, 12),
        ))


def test_schedule_overlap_detected():
    with pytest.raises(GapInSchedule):
        validate_schedule((
            parse_interval("00:00-10:00", 2, 4),
            parse_interval("08:00-24:00", 6, 12),
        ))


def test_schedule_must_cover_full_day():
    with pytest.raises(GapInSchedule):
        validate_schedule((parse_interval("00:00-23:00", 2, 4),))
    with pytest.raises(GapInSchedule):
        validate_schedule((parse_interval("01:00-24:00", 2, 4),))
    with pytest.raises(GapInSchedule):
        validate_schedule(())


def test_schedule_rejects_negative_targets():
    with pytest.raises(InvalidConfig):
        validate_schedule((ScheduleInterval(0, 86400, -1, 4),))


def test_interval_parse_errors():
    with pytest.raises(InvalidConfig):
        parse_interval("25:00-26:00", 1, 1)
    with pytest.raises(InvalidConfig):
        parse_interval("00:00", 1, 1)
    with pytest.raises(InvalidConfig):
        parse_interval("24:00-24:00", 1, 1)  # 24:00 only valid as an end


def test_periodic_decide_picks_active_interval():
    sched = day_schedule()
    night = periodic_decide(sched, 3 * 3600, 2, 4)
    assert night.action is ScaleAction.NO_CHANGE
    morning = periodic_decide(sched, 8 * 3600, 2, 4)
    assert morning.action is ScaleAction.SCALE_OUT
    assert (morning.target_prefill, morning.target_decode) == (6, 12)
    evening = periodic_decide(sched, 20 * 3600, 6, 12)
    assert evening.action is ScaleAction.SCALE_IN
    assert evening.target_decode == 6


def test_periodic_decide_wraps_past_midnight():
    sched = day_schedule()
    wrapped = periodic_decide(sched, 86400 + 60, 9, 9)
    assert (wrapped.target_prefill, wrapped.target_decode) == (2, 4)


def test_periodic_boundary_is_half_open():
    sched = day_schedule()
    last_night_second = periodic_decide(sched, 8 * 3600 - 1, 9, 9)
    assert last_night_second.target_decode == 4
    first_morning_second = periodic_decide(sched, 8 * 3600, 9, 9)
    assert first_morning_second.target_decode == 12


# --- anti-flap and dampening ------------------------------------------------


def test_anti_flap_suppresses_recent_opposite_direction():
    cfg = prop_cfg(cooldown_out=5, cooldown_in=10)
    history = [ActionRecord(0, ScaleAction.SCALE_IN), ActionRecord(8, ScaleAction.SCALE_OUT)]
    wish = ScalingDecision(ScaleAction.SCALE_IN, 4, 8, "test")
    held = anti_flap_filter(wish, history, cfg, now=12, current_prefill=5, current_decode=10)
    assert held.action is ScaleAction.NO_CHANGE
    assert "anti-flap" in held.cause
    assert (held.target_prefill, held.target_decode) == (5, 10)
    # once the window has passed the same wish goes through untouched
    passed = anti_flap_filter(wish, history, cfg, now=18, current_prefill=5, current_decode=10)
    assert passed == wish


def test_anti_flap_only_most_recent_opposite_counts():
    cfg = prop_cfg(cooldown_out=5, cooldown_in=10)
    history = [ActionRecord(0, ScaleAction.SCALE_OUT), ActionRecord(8, ScaleAction.SCALE_IN)]
    wish = ScalingDecision(ScaleAction.SCALE_IN, 4, 8, "test")
    # the out action is 12 ticks old; the newer in action is same-direction
    passed = anti_flap_filter(wish, history, cfg, now=12, current_prefill=5, current_decode=10)
    assert passed == wish


def test_anti_flap_ignores_no_change_and_empty_history():
    cfg = prop_cfg()
    idle = ScalingDecision(ScaleAction.NO_CHANGE, 5, 10, "idle")
    assert anti_flap_filter(idle, [], cfg, 0, 5, 10) == idle
    wish = ScalingDecision(ScaleAction.SCALE_OUT, 8, 16, "go")
    assert anti_flap_filter(wish, [], cfg, 0, 5, 10) == wish


def test_dampening_scales_decode_delta_and_rederives_pair():
    cfg = prop_cfg(dampening=0.5)
    wish = ScalingDecision(ScaleAction.SCALE_OUT, 8, 16, "go")
    # delta 6 -> 3 (round half up), so 13 decode and ceil(6.5) = 7 prefill
    damped = anti_flap_filter(wish, [], cfg, now=0, current_prefill=5, current_decode=10)
    assert damped.action is ScaleAction.SCALE_OUT
    assert (damped.target_prefill, damped.target_decode) == (7, 13)
    assert damped.cause.endswith("dampened")


def test_dampening_to_zero_suppresses():
    cfg = prop_cfg(dampening=0.4)
    wish = ScalingDecision(ScaleAction.SCALE_IN, 4, 9, "down")  # delta -1 -> 0
    held = anti_flap_filter(wish, [], cfg, now=0, current_prefill=5, current_decode=10)
    assert held.action is ScaleAction.NO_CHANGE
    assert "suppressed:dampened" in held.cause


def test_dampening_half_delta_rounds_half_up():
    cfg = prop_cfg(dampening=0.5)
    wish = ScalingDecision(ScaleAction.SCALE_OUT, 6, 11, "go")  # delta 1 -> 0.5 -> 1
    kept = anti_flap_filter(wish, [], cfg, now=0, current_prefill=5, current_decode=10)
    assert kept.action is ScaleAction.SCALE_OUT
    assert kept.target_decode == 11


# --- ratio sweep / pressure test --------------------------------------------


def bruteforce_max_counts(profile, budget, ratio):
    best = None
    for d in range(1, budget // profile.gpus_per_decode_instance + 1):
        p = max(1, math.ceil(d * ratio - 1e-12))
        if p * profile.gpus_per_prefill_instance + d * profile.gpus_per_decode_instance <= budget:
            best = (p, d)
    return best


def test_sweep_counts_match_bruteforce_budget_packing():
    trace = flat_trace(4.0)
    points = sweep_pd_ratios(PT_PROFILE, trace, 128)
    for pt in points:
        expect = bruteforce_max_counts(PT_PROFILE, 128, pt.ratio)
        assert (pt.prefill, pt.decode) == expect, pt.ratio_label
        gpus = pt.prefill * 8 + pt.decode * 8
        assert gpus <= 128


def test_sweep_marks_budget_infeasible_ratio():
    trace = flat_trace(1.0)
    points = sweep_pd_ratios(PT_PROFILE, trace, 16, ratio_grid=("1:1", "2:1"))
    by_label = {pt.ratio_label: pt for pt in points}
    assert by_label["1:1"].decode == 1
    assert by_label["2:1"].breach == "budget"
    assert not by_label["2:1"].feasible
    assert by_label["2:1"].max_scale == 0.0


def test_sweep_rejects_hopeless_budget():
    with pytest.raises(InvalidInput):
        sweep_pd_ratios(PT_PROFILE, flat_trace(1.0), 8)
    with pytest.raises(InvalidInput):
        sweep_pd_ratios(PT_PROFILE, flat_trace(1.0), 128, ratio_grid=())


def closed_form_max_scale(profile, prefill, decode, peak_p, peak_d):
    """SLO-limited demand multiple from the latency formulas, no search."""
    rho_p_lim = 1.0 - profile.ttft_base / profile.slo_ttft
    rho_d_lim = 1.0 - profile.tbt_base / profile.slo_tbt
    return min(
        prefill * profile.prefill_capacity * rho_p_lim / peak_p,
        decode * profile.decode_capacity * rho_d_lim / peak_d,
    )


def test_bisection_matches_closed_form_scale():
    trace = flat_trace(10.0)  # peak demand: 30000 prefill, 3500 decode
    points = sweep_pd_ratios(PT_PROFILE, trace, 160)
    for pt in points:
        if pt.breach == "budget":
            continue
        expect = closed_form_max_scale(PT_PROFILE, pt.prefill, pt.decode, 30000.0, 3500.0)
        assert pt.max_scale == pytest.approx(expect, rel=2e-3), pt.ratio_label
        assert pt.feasible == (expect >= 1.0)


def test_pressure_test_returns_throughput_argmax():
    trace = flat_trace(10.0)
    points = sweep_pd_ratios(PT_PROFILE, trace, 160)
    r_opt, m_hat = pressure_test(PT_PROFILE, trace, gpu_budget=160)
    best = max((pt for pt in points if pt.feasible), key=lambda pt: (pt.served_tps, -pt.ratio))
    assert r_opt == pytest.approx(best.ratio)
    assert m_hat == pytest.approx(best.decode_tps_per_instance)
    assert m_hat <= PT_PROFILE.decode_capacity


def test_pressure_test_raises_when_nothing_feasible():
    trace = flat_trace(200.0)  # far beyond any packing of 32 GPUs
    with pytest.raises(NoFeasibleRatio):
        pressure_test(PT_PROFILE, trace, gpu_budget=32)


def test_interior_ratio_beats_extremes_on_balanced_demand():
    # Demand shaped so both roles matter: extreme ratios starve one side.
    trace = flat_trace(10.0)
    points = {pt.ratio_label: pt for pt in sweep_pd_ratios(PT_PROFILE, trace, 160)}
    best_label = max(
        (pt for pt in points.values() if pt.feasible),
        key=lambda pt: (pt.served_tps, -pt.ratio),
    ).ratio_label
    assert best_label not in (DEFAULT_RATIO_GRID[0], DEFAULT_RATIO_GRID[-1])


# --- candidate ranking ------------------------------------------------------


def test_rank_key_prefers_feasible_then_score_then_name():
    lo = CandidateScore("a-low", True, 0.0, 10.0, 1.0, 10.0)
    hi = CandidateScore("b-high", True, 0.005, 100.0, 1.0, 100.0)
    hot = CandidateScore("c-hot", False, 0.4, 1000.0, 1.0, 1000.0)
    ranked = sorted([hot, lo, hi], key=lambda s: s.rank_key(), reverse=True)
    assert [s.policy_name for s in ranked] == ["b-high", "a-low", "c-hot"]
    # exact tie broken by name, deterministically
    twin_a = CandidateScore("aa", True, 0.0, 10.0, 1.0, 50.0)
    twin_b = CandidateScore("ab", True, 0.0, 10.0, 1.0, 50.0)
    assert max([twin_a, twin_b], key=lambda s: s.rank_key()).policy_name == "ab"
