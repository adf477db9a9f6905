"""Closed-loop simulation driver, run configuration, and report emission.

Every tick runs the same fixed pipeline per service:

    demand -> lifecycle advance -> discovery gate -> metrics -> drain watch ->
    smoothed policy decision -> anti-flap -> scheduling cycle (fresh tree) ->
    record

Runs are deterministic for a fixed config: the only randomness is the seeded
trace generator, and all scheduling/tie-breaking is ordered. The env var
``HETSCALE_SEED`` overrides the config seed when set.
"""

from __future__ import annotations

import copy
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import yaml

from .errors import ConfigError, HetscaleError, InvalidConfig, InvalidInput
from .policy import (
    DEFAULT_RATIO_GRID,
    ActionRecord,
    PolicyConfig,
    PolicyKind,
    ScaleAction,
    ScalingDecision,
    anti_flap_filter,
    apply_pd_ratio,
    feedback_decide,
    parse_interval,
    parse_ratio,
    periodic_decide,
    proportional_decide,
)
from .scheduler import (
    AffinityScope,
    Allocation,
    ClusterState,
    PreScheduler,
    ScalingRequest,
    ServiceAffinity,
    ServiceSchedEntry,
)
from .servicesim import (
    RATE_METRICS,
    Instance,
    InstanceState,
    MetricsSample,
    Role,
    ServiceProfile,
    cross_s2_penalty,
    make_reference_instances,
    step_metrics,
)
from .topology import GpuType, NodeSpec, load_cluster
from .workload import WorkloadTrace, demand_at, gen_diurnal_trace, load_trace

SEED_ENV_VAR = "HETSCALE_SEED"
TIMELINE_FIELDS = (
    "t",
    "prefill_tps",
    "decode_tps",
    "cache_missed_prefill_tps",
    "prefill_gpu_util",
    "decode_gpu_util",
    "prefill_sm_act",
    "decode_sm_act",
    "ttft",
    "tbt",
    "prefill_count",
    "decode_count",
)
EVENT_FIELDS = (
    "t",
    "service",
    "event",
    "action",
    "cause",
    "prefill_delta",
    "decode_delta",
    "target_prefill",
    "target_decode",
    "subgroup",
)
SUMMARY_FIELDS = ("service", "metric", "value")


# -- configuration -----------------------------------------------------------


@dataclass
class ServiceConfig:
    name: str
    profile: ServiceProfile
    policy: PolicyConfig
    sched: ServiceSchedEntry
    initial_prefill: int | None = None
    initial_decode: int | None = None

    def initial_counts(self) -> tuple[int, int]:
        if self.initial_decode is not None:
            decode = self.initial_decode
            prefill = (
                self.initial_prefill
                if self.initial_prefill is not None
                else apply_pd_ratio(decode, self.policy)[0]
            )
            return (prefill, decode)
        prefill, decode = apply_pd_ratio(max(self.policy.min_decode, 2), self.policy)
        if self.initial_prefill is not None:
            prefill = self.initial_prefill
        return (prefill, decode)


@dataclass
class TraceSpec:
    file: str | None = None
    generate: dict | None = None


@dataclass
class RunConfig:
    gpu_types: dict[str, GpuType]
    nodes: list[NodeSpec]
    trace_spec: TraceSpec
    services: list[ServiceConfig]
    seed: int = 0
    tick_seconds: float = 60.0
    output_dir: str = "out"
    candidate_policies: list[PolicyConfig] = field(default_factory=list)
    ratio_grid: tuple = ()
    gpu_budget: int | None = None
    slo_violation_budget: float = 0.01
    _trace: WorkloadTrace | None = field(default=None, repr=False)

    def resolve_trace(self) -> WorkloadTrace:
        if self._trace is not None:
            return self._trace
        spec = self.trace_spec
        if spec.file:
            trace = load_trace(spec.file, tick_seconds=self.tick_seconds)
        elif spec.generate is not None:
            params = dict(spec.generate)
            if params.get("noise_seed") is None:
                params["noise_seed"] = self.seed
            params.setdefault("tick_seconds", self.tick_seconds)
            trace = gen_diurnal_trace(
                duration_ticks=int(params.pop("duration_ticks")),
                base_rate=float(params.pop("base_rate")),
                peak_rate=float(params.pop("peak_rate")),
                peak_times=list(params.pop("peak_times")),
                noise_seed=params.pop("noise_seed"),
                **params,
            )
        else:
            raise ConfigError("trace section needs either 'file' or 'generate'")
        self._trace = trace
        return trace

    def primary_service(self) -> ServiceConfig:
        return self.services[0]

    def pressure_gpu_budget(self) -> int:
        if self.gpu_budget is not None:
            return self.gpu_budget
        return sum(n.gpu_count for n in self.nodes)

    def with_policy(self, service_name: str, policy: PolicyConfig) -> "RunConfig":
        """A copy of this config with one service's policy swapped out.

        The resolved trace is shared so every variant replays identical demand.
        """
        services = []
        for svc in self.services:
            if svc.name == service_name:
                services.append(replace(copy.copy(svc), policy=policy))
            else:
                services.append(copy.copy(svc))
        clone = replace(copy.copy(self), services=services)
        clone._trace = self.resolve_trace()
        return clone


def load_config(path: str | Path) -> RunConfig:
    """Load and validate a YAML run config; relative paths resolve against it."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {str(path)!r} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {str(path)!r} is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping of sections")
    try:
        return parse_config(raw, base_dir=path.parent)
    except (InvalidConfig, InvalidInput, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"config {str(path)!r}: {exc}") from exc


def parse_config(raw: Mapping, base_dir: Path | None = None) -> RunConfig:
    base_dir = base_dir or Path.cwd()
    for section in ("cluster", "trace", "services"):
        if section not in raw:
            raise InvalidConfig(f"missing required section {section!r}")

    seed = int(raw.get("seed", 0))
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise InvalidConfig(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from None
    tick_seconds = float(raw.get("tick_seconds", 60.0))

    cluster = raw["cluster"]
    gpu_types = {
        name: GpuType(
            name=name,
            compute_score=float(spec.get("compute_score", 1.0)),
            mem_bw_score=float(spec.get("mem_bw_score", 1.0)),
            hbm_capacity_gb=float(spec.get("hbm_capacity_gb", 96.0)),
        )
        for name, spec in (cluster.get("gpu_types") or {"default": {}}).items()
    }
    if "file" not in cluster:
        raise InvalidConfig("cluster section needs a 'file' entry")
    cluster_path = Path(cluster["file"])
    if not cluster_path.is_absolute():
        cluster_path = base_dir / cluster_path
    nodes = load_cluster(str(cluster_path), gpu_types)

    trace_raw = raw["trace"]
    trace_file = trace_raw.get("file")
    if trace_file:
        trace_path = Path(trace_file)
        if not trace_path.is_absolute():
            trace_path = base_dir / trace_path
        trace_file = str(trace_path)
    trace_spec = TraceSpec(file=trace_file, generate=trace_raw.get("generate"))
    if trace_spec.file is None and trace_spec.generate is None:
        raise InvalidConfig("trace section needs 'file' or 'generate'")

    services = [parse_service(entry, gpu_types) for entry in raw["services"]]
    if not services:
        raise InvalidConfig("at least one service is required")
    names = [s.name for s in services]
    if len(names) != len(set(names)):
        raise InvalidConfig("service names must be unique")

    candidates = [parse_policy(p) for p in raw.get("candidate_policies", [])]
    pressure = raw.get("pressure_test", {}) or {}
    curation = raw.get("curation", {}) or {}
    return RunConfig(
        gpu_types=gpu_types,
        nodes=nodes,
        trace_spec=trace_spec,
        services=services,
        seed=seed,
        tick_seconds=tick_seconds,
        output_dir=str(raw.get("output_dir", "out")),
        candidate_policies=candidates,
        ratio_grid=tuple(pressure.get("ratio_grid") or DEFAULT_RATIO_GRID),
        gpu_budget=pressure.get("gpu_budget"),
        slo_violation_budget=float(curation.get("slo_violation_budget", 0.01)),
    )


def parse_service(entry: Mapping, gpu_types: Mapping[str, GpuType]) -> ServiceConfig:
    name = entry["name"]
    prof = entry["profile"]
    profile = ServiceProfile(
        prefill_capacity=float(prof["prefill_capacity"]),
        decode_capacity=float(prof["decode_capacity"]),
        ttft_base=float(prof["ttft_base"]),
        tbt_base=float(prof["tbt_base"]),
        slo_ttft=float(prof["slo_ttft"]),
        slo_tbt=float(prof["slo_tbt"]),
        decode_util_floor=float(prof.get("decode_util_floor", 0.75)),
        gpus_per_prefill_instance=int(prof.get("gpus_per_prefill_instance", 4)),
        gpus_per_decode_instance=int(prof.get("gpus_per_decode_instance", 4)),
    )
    policy = parse_policy(entry["policy"])
    sched_raw = entry.get("scheduler", {}) or {}
    default_type = next(iter(sorted(gpu_types)))
    affinity = ServiceAffinity(
        scope=AffinityScope(sched_raw.get("affinity", "same_s2")),
        prefill_gpu_type=sched_raw.get("prefill_gpu_type", default_type),
        decode_gpu_type=sched_raw.get("decode_gpu_type", default_type),
    )
    for role_type in (affinity.prefill_gpu_type, affinity.decode_gpu_type):
        if role_type not in gpu_types:
            raise InvalidConfig(f"service {name!r} references unknown GPU type {role_type!r}")
    sched = ServiceSchedEntry(
        profile=profile,
        affinity=affinity,
        priority=int(sched_raw.get("priority", 1)),
        gate_tolerance=float(sched_raw.get("gate_tolerance", 0.0)),
        drain_window=int(sched_raw.get("drain_window", 5)),
        startup_ticks={
            Role.PREFILL: int(sched_raw.get("prefill_startup_ticks", 2)),
            Role.DECODE: int(sched_raw.get("decode_startup_ticks", 3)),
        },
    )
    return ServiceConfig(
        name=name,
        profile=profile,
        policy=policy,
        sched=sched,
        initial_prefill=sched_raw.get("initial_prefill"),
        initial_decode=sched_raw.get("initial_decode"),
    )


def parse_policy(raw: Mapping) -> PolicyConfig:
    kind = PolicyKind(raw.get("kind", "proportional"))
    schedule = tuple(
        parse_interval(item["interval"], int(item["prefill"]), int(item["decode"]))
        for item in raw.get("schedule", [])
    )
    return PolicyConfig(
        name=raw.get("name", kind.value),
        kind=kind,
        metric=raw.get("metric", "decode_tps"),
        target_per_instance=_opt_float(raw.get("target_per_instance")),
        scale_out_threshold=float(raw.get("scale_out_threshold", 0.1)),
        scale_in_threshold=float(raw.get("scale_in_threshold", 0.1)),
        cooldown_out=int(raw.get("cooldown_out", 5)),
        cooldown_in=int(raw.get("cooldown_in", 10)),
        latency_target=_opt_float(raw.get("latency_target")),
        breach_major=float(raw.get("breach_major", 1.25)),
        breach_minor=float(raw.get("breach_minor", 1.1)),
        relax_below=float(raw.get("relax_below", 0.95)),
        factor_major=float(raw.get("factor_major", 1.2)),
        factor_minor=float(raw.get("factor_minor", 1.1)),
        factor_in=float(raw.get("factor_in", 0.95)),
        pd_ratio=parse_ratio(raw.get("pd_ratio", "1:2")),
        min_prefill=int(raw.get("min_prefill", 1)),
        max_prefill=int(raw.get("max_prefill", 10_000)),
        min_decode=int(raw.get("min_decode", 1)),
        max_decode=int(raw.get("max_decode", 10_000)),
        dampening=float(raw.get("dampening", 1.0)),
        smoothing_window=int(raw.get("smoothing_window", 3)),
        schedule=schedule,
    )


def _opt_float(value) -> float | None:
    return None if value is None else float(value)


# -- report model ------------------------------------------------------------


@dataclass(frozen=True)
class TickRow:
    t: int
    sample: MetricsSample
    prefill_count: int
    decode_count: int
    registered_prefill: int
    registered_decode: int
    gpus_held: int


@dataclass(frozen=True)
class RunEvent:
    t: int
    service: str
    event: str
    action: str
    cause: str
    prefill_delta: int
    decode_delta: int
    target_prefill: int
    target_decode: int
    subgroup: str


@dataclass(frozen=True)
class ServiceSummary:
    ticks: int
    gpu_hours: float
    mean_prefill_gpu_util: float
    mean_decode_gpu_util: float
    mean_prefill_sm_act: float
    mean_decode_sm_act: float
    slo_violation_fraction: float
    scaling_actions: int
    direction_reversals: int
    served_prefill_tokens: float
    served_decode_tokens: float

    def as_rows(self) -> list[tuple[str, float]]:
        return [
            ("ticks", float(self.ticks)),
            ("gpu_hours", self.gpu_hours),
            ("mean_prefill_gpu_util", self.mean_prefill_gpu_util),
            ("mean_decode_gpu_util", self.mean_decode_gpu_util),
            ("mean_prefill_sm_act", self.mean_prefill_sm_act),
            ("mean_decode_sm_act", self.mean_decode_sm_act),
            ("slo_violation_fraction", self.slo_violation_fraction),
            ("scaling_actions", float(self.scaling_actions)),
            ("direction_reversals", float(self.direction_reversals)),
            ("served_prefill_tokens", self.served_prefill_tokens),
            ("served_decode_tokens", self.served_decode_tokens),
        ]


@dataclass(frozen=True)
class ServiceTimeline:
    rows: tuple[TickRow, ...]
    summary: ServiceSummary


@dataclass(frozen=True)
class SimReport:
    tick_seconds: float
    services: dict[str, ServiceTimeline]
    events: tuple[RunEvent, ...]


# -- simulation --------------------------------------------------------------


class _ServiceRuntime:
    def __init__(self, cfg: ServiceConfig):
        self.cfg = cfg
        self.samples: list[MetricsSample] = []
        self.rows: list[TickRow] = []
        self.violations = 0
        self.last_action_tick = -(10**9)
        self.actions: list[ActionRecord] = []

    def smoothed(self, metric: str) -> float:
        window = self.cfg.policy.smoothing_window
        recent = self.samples[-window:]
        return sum(s.value(metric) for s in recent) / len(recent)

    def smoothed_breach(self) -> bool:
        profile = self.cfg.profile
        return (
            self.smoothed("ttft") > profile.slo_ttft
            or self.smoothed("tbt") > profile.slo_tbt
        )


def run_simulation(config: RunConfig) -> SimReport:
    trace = config.resolve_trace()
    state = ClusterState(config.nodes)
    sched = PreScheduler(state, {s.name: s.sched for s in config.services})
    runtimes = {s.name: _ServiceRuntime(s) for s in config.services}
    events: list[RunEvent] = []

    for svc in config.services:
        _bootstrap_service(sched, state, svc)

    for t in range(len(trace)):
        point = trace.points[t]
        demand = demand_at(trace, t)
        requests: list[ScalingRequest] = []
        decisions: dict[str, ScalingDecision] = {}

        for svc in config.services:
            rt = runtimes[svc.name]
            insts = state.service_instances(svc.name)
            _advance(insts, t, svc.sched.startup_ticks)
            for group in state.service_groups(svc.name):
                sched.discovery_gate(group, svc.policy.pd_ratio)

            serving = [i for i in insts if i.serving]
            penalty = cross_s2_penalty(_cross_fraction(serving, state))
            sample = step_metrics(
                svc.profile,
                demand,
                serving,
                penalty,
                kv_hit_rate=point.kv_cache_hit_rate,
                t=t,
            )
            rt.samples.append(sample)
            if sample.ttft > svc.profile.slo_ttft or sample.tbt > svc.profile.slo_tbt:
                rt.violations += 1

            reinstated, terminated = sched.observe_slo(svc.name, t, rt.smoothed_breach())
            if reinstated:
                events.append(_lifecycle_event(t, svc.name, "reinstate", reinstated, state))
            if terminated:
                events.append(_lifecycle_event(t, svc.name, "terminate", terminated, state))

            decision = _decide(svc, rt, state, t, config.tick_seconds)
            decision = anti_flap_filter(
                decision,
                rt.actions,
                svc.policy,
                t,
                _live_count(state, svc.name, Role.PREFILL),
                _live_count(state, svc.name, Role.DECODE),
            )
            request = _to_request(svc, decision, state)
            if request is not None:
                requests.append(request)
                decisions[svc.name] = decision

        if requests:
            tree, subgroups = sched.construct_tree_view()
            allocations = sched.schedule_cycle(requests, t, tree, subgroups)
            for alloc in allocations:
                decision = decisions[alloc.service_id]
                rt = runtimes[alloc.service_id]
                executed = alloc.prefill_assigned > 0 or alloc.decode_assigned > 0
                if executed:
                    rt.last_action_tick = t
                    rt.actions.append(ActionRecord(tick=t, action=decision.action))
                    events.append(
                        RunEvent(
                            t=t,
                            service=alloc.service_id,
                            event="decision",
                            action=decision.action.value,
                            cause=decision.cause,
                            prefill_delta=alloc.prefill_assigned,
                            decode_delta=alloc.decode_assigned,
                            target_prefill=decision.target_prefill,
                            target_decode=decision.target_decode,
                            subgroup=alloc.subgroup_id or "",
                        )
                    )
                events.append(
                    RunEvent(
                        t=t,
                        service=alloc.service_id,
                        event="allocation",
                        action=alloc.request_type.value,
                        cause=alloc.note or ("ok" if not alloc.shortfall else "shortfall"),
                        prefill_delta=alloc.prefill_assigned,
                        decode_delta=alloc.decode_assigned,
                        target_prefill=alloc.prefill_requested,
                        target_decode=alloc.decode_requested,
                        subgroup=alloc.subgroup_id or "",
                    )
                )

        for svc in config.services:
            rt = runtimes[svc.name]
            insts = state.service_instances(svc.name)
            rt.rows.append(
                TickRow(
                    t=t,
                    sample=rt.samples[-1],
                    prefill_count=sum(1 for i in insts if i.holds_resources and i.role is Role.PREFILL),
                    decode_count=sum(1 for i in insts if i.holds_resources and i.role is Role.DECODE),
                    registered_prefill=sum(1 for i in insts if i.serving and i.role is Role.PREFILL),
                    registered_decode=sum(1 for i in insts if i.serving and i.role is Role.DECODE),
                    gpus_held=sum(i.gpus for i in insts if i.holds_resources),
                )
            )

    services = {
        name: ServiceTimeline(
            rows=tuple(rt.rows),
            summary=_summarize(rt, config.tick_seconds),
        )
        for name, rt in runtimes.items()
    }
    return SimReport(tick_seconds=config.tick_seconds, services=services, events=tuple(events))


def _bootstrap_service(sched: PreScheduler, state: ClusterState, svc: ServiceConfig) -> None:
    """Place the initial fleet and force it Ready+registered at t=0.

    Initial provisioning deliberately bypasses startup and the discovery gate
    so that compared policies all start from an identical serving state.
    """
    prefill, decode = svc.initial_counts()
    if prefill == 0 and decode == 0:
        return
    request = ScalingRequest(
        service_id=svc.name,
        request_type=ScaleAction.SCALE_OUT,
        prefill_delta=prefill,
        decode_delta=decode,
        priority=svc.sched.priority,
        affinity=svc.sched.affinity,
    )
    allocations = sched.schedule_cycle([request], now=0)
    if allocations[0].shortfall:
        raise HetscaleError(
            f"cluster cannot fit the initial fleet for {svc.name!r} "
            f"({prefill}P+{decode}D)"
        )
    for inst in state.service_instances(svc.name):
        inst.state = InstanceState.READY
        inst.registered = True


def _advance(instances: Sequence[Instance], t: int, startup: Mapping[Role, int]) -> None:
    for inst in instances:
        if inst.state is InstanceState.STARTING and t - inst.start_tick >= startup[inst.role]:
            inst.state = InstanceState.READY


def _live_count(state: ClusterState, service: str, role: Role) -> int:
    return sum(
        1
        for i in state.service_instances(service)
        if i.role is role and i.state in (InstanceState.STARTING, InstanceState.READY)
    )


def _cross_fraction(serving: Sequence[Instance], state: ClusterState) -> float:
    """Fraction of prefill-decode pairs whose KV transfer crosses S2 domains."""
    s2_of = {n.node_id: n.s2_id for n in state.nodes}
    p_by_s2: dict[str, int] = {}
    d_by_s2: dict[str, int] = {}
    for inst in serving:
        bucket = p_by_s2 if inst.role is Role.PREFILL else d_by_s2
        s2 = s2_of.get(inst.node_id, "")
        bucket[s2] = bucket.get(s2, 0) + 1
    total_p = sum(p_by_s2.values())
    total_d = sum(d_by_s2.values())
    if total_p == 0 or total_d == 0:
        return 0.0
    same = sum(p_by_s2.get(s2, 0) * d_by_s2.get(s2, 0) for s2 in set(p_by_s2) | set(d_by_s2))
    return 1.0 - same / (total_p * total_d)


def _decide(
    svc: ServiceConfig,
    rt: _ServiceRuntime,
    state: ClusterState,
    t: int,
    tick_seconds: float,
) -> ScalingDecision:
    policy = svc.policy
    live_p = _live_count(state, svc.name, Role.PREFILL)
    live_d = _live_count(state, svc.name, Role.DECODE)
    if policy.kind is PolicyKind.PERIODIC:
        now_s = int(t * tick_seconds) % 86400
        return periodic_decide(policy.schedule, now_s, live_p, live_d)
    value = rt.smoothed(policy.metric)
    if policy.kind is PolicyKind.PROPORTIONAL:
        if policy.metric in RATE_METRICS:
            role = Role.DECODE if policy.metric.startswith("decode") else Role.PREFILL
            count = max(1, _live_count(state, svc.name, role))
            value = value / count
        return proportional_decide(policy, max(live_d, 1), value, rt.last_action_tick, t)
    return feedback_decide(policy, max(live_d, 1), value, rt.last_action_tick, t)


def _to_request(
    svc: ServiceConfig, decision: ScalingDecision, state: ClusterState
) -> ScalingRequest | None:
    """Convert a decision into a coordinated request, or defer it.

    Metric-policy actions whose delta would move exactly one role are deferred
    (returned as None) until drift moves both; a scale action must never change
    a single role's count. Periodic targets are executed as stated.
    """
    if decision.action is ScaleAction.NO_CHANGE:
        return None
    live_p = _live_count(state, svc.name, Role.PREFILL)
    live_d = _live_count(state, svc.name, Role.DECODE)
    dp = decision.target_prefill - live_p
    dd = decision.target_decode - live_d
    if decision.action is ScaleAction.SCALE_OUT:
        dp, dd = max(dp, 0), max(dd, 0)
    else:
        dp, dd = max(-dp, 0), max(-dd, 0)
    if dp == 0 and dd == 0:
        return None
    if svc.policy.kind is not PolicyKind.PERIODIC and (dp == 0) != (dd == 0):
        return None
    return ScalingRequest(
        service_id=svc.name,
        request_type=decision.action,
        prefill_delta=dp,
        decode_delta=dd,
        priority=svc.sched.priority,
        affinity=svc.sched.affinity,
    )


def _lifecycle_event(
    t: int, service: str, kind: str, instance_ids: Sequence[int], state: ClusterState
) -> RunEvent:
    roles = [state.instances[iid].role for iid in instance_ids]
    return RunEvent(
        t=t,
        service=service,
        event=kind,
        action="",
        cause=f"{len(instance_ids)} instances",
        prefill_delta=sum(1 for r in roles if r is Role.PREFILL),
        decode_delta=sum(1 for r in roles if r is Role.DECODE),
        target_prefill=0,
        target_decode=0,
        subgroup="",
    )


def _summarize(rt: _ServiceRuntime, tick_seconds: float) -> ServiceSummary:
    rows = rt.rows
    n = len(rows)
    if n == 0:
        raise InvalidInput("cannot summarize an empty run")
    actions = [a for a in rt.actions]
    reversals = sum(
        1
        for prev, cur in zip(actions, actions[1:])
        if {prev.action, cur.action} == {ScaleAction.SCALE_OUT, ScaleAction.SCALE_IN}
    )
    return ServiceSummary(
        ticks=n,
        gpu_hours=sum(r.gpus_held for r in rows) * tick_seconds / 3600.0,
        mean_prefill_gpu_util=sum(r.sample.prefill_gpu_util for r in rows) / n,
        mean_decode_gpu_util=sum(r.sample.decode_gpu_util for r in rows) / n,
        mean_prefill_sm_act=sum(r.sample.prefill_sm_act for r in rows) / n,
        mean_decode_sm_act=sum(r.sample.decode_sm_act for r in rows) / n,
        slo_violation_fraction=rt.violations / n,
        scaling_actions=len(actions),
        direction_reversals=reversals,
        served_prefill_tokens=sum(r.sample.cache_missed_prefill_tps for r in rows) * tick_seconds,
        served_decode_tokens=sum(r.sample.decode_tps for r in rows) * tick_seconds,
    )


# -- baseline & comparison ---------------------------------------------------


def peak_static_counts(
    profile: ServiceProfile, trace: WorkloadTrace, pd_ratio: float, *, placement_penalty: float = 1.25
) -> tuple[int, int]:
    """Smallest ratio-coordinated fleet meeting both SLOs at the trace maxima.

    Sized against the worst per-role demand anywhere in the trace and the
    worst-case cross-S2 placement penalty, the way a peak capacity plan would.
    """
    max_p = max(p.arrival_rate * p.mean_input_len * (1 - p.kv_cache_hit_rate) for p in trace.points)
    max_d = max(p.arrival_rate * p.mean_output_len for p in trace.points)
    for decode in range(1, 100_000):
        prefill = max(1, math.ceil(decode * pd_ratio - 1e-12))
        fleet = make_reference_instances(prefill, decode, profile=profile)
        sample = step_metrics(profile, (max_p, max_d), fleet, placement_penalty)
        if sample.ttft <= profile.slo_ttft and sample.tbt <= profile.slo_tbt:
            return (prefill, decode)
    raise InvalidInput("no static fleet satisfies the SLOs at peak demand")


def static_baseline_config(config: RunConfig) -> RunConfig:
    """Peak-provisioned no-scaling variant of the primary service's config."""
    from .policy import ScheduleInterval  # local to avoid header clutter

    svc = config.primary_service()
    trace = config.resolve_trace()
    prefill, decode = peak_static_counts(svc.profile, trace, svc.policy.pd_ratio)
    policy = PolicyConfig(
        name="static-peak",
        kind=PolicyKind.PERIODIC,
        pd_ratio=svc.policy.pd_ratio,
        min_prefill=0,
        max_prefill=max(prefill, 1),
        min_decode=0,
        max_decode=max(decode, 1),
        schedule=(ScheduleInterval(0, 86400, prefill, decode),),
    )
    variant = config.with_policy(svc.name, policy)
    for entry in variant.services:
        if entry.name == svc.name:
            entry.initial_prefill = prefill
            entry.initial_decode = decode
    return variant


def compare_policies(config: RunConfig, policies: Sequence[PolicyConfig]) -> dict[str, SimReport]:
    """Replay the same trace and initial state once per policy."""
    if len(policies) < 2:
        raise InvalidInput("comparison needs at least two policies")
    names = [p.name for p in policies]
    if len(names) != len(set(names)):
        raise InvalidInput("policy names must be unique for comparison")
    svc = config.primary_service()
    out: dict[str, SimReport] = {}
    for policy in policies:
        out[policy.name] = run_simulation(config.with_policy(svc.name, policy))
    return out


# -- report emission ---------------------------------------------------------


def emit_report(report: SimReport, out_dir: str | Path) -> list[Path]:
    """Write timeline/summary/events CSVs; float cells use shortest-exact repr."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written: list[Path] = []
        single = len(report.services) == 1
        for name, timeline in sorted(report.services.items()):
            path = out / ("timeline.csv" if single else f"timeline_{name}.csv")
            _write_timeline(path, timeline)
            written.append(path)
        summary_path = out / "summary.csv"
        with open(summary_path, "w", newline="") as fh:
            fh.write(",".join(SUMMARY_FIELDS) + "\n")
            for name, timeline in sorted(report.services.items()):
                for metric, value in timeline.summary.as_rows():
                    fh.write(f"{name},{metric},{_cell(value)}\n")
        written.append(summary_path)
        events_path = out / "events.csv"
        with open(events_path, "w", newline="") as fh:
            fh.write(",".join(EVENT_FIELDS) + "\n")
            for ev in report.events:
                fh.write(
                    f"{ev.t},{ev.service},{ev.event},{ev.action},"
                    f"{_quote(ev.cause)},{ev.prefill_delta},{ev.decode_delta},"
                    f"{ev.target_prefill},{ev.target_decode},{ev.subgroup}\n"
                )
        written.append(events_path)
        return written
    except OSError as exc:
        raise HetscaleError(f"cannot write report to {str(out)!r}: {exc}") from exc


def _write_timeline(path: Path, timeline: ServiceTimeline) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(TIMELINE_FIELDS) + "\n")
        for row in timeline.rows:
            s = row.sample
            cells = [
                str(row.t),
                _cell(s.prefill_tps),
                _cell(s.decode_tps),
                _cell(s.cache_missed_prefill_tps),
                _cell(s.prefill_gpu_util),
                _cell(s.decode_gpu_util),
                _cell(s.prefill_sm_act),
                _cell(s.decode_sm_act),
                _cell(s.ttft),
                _cell(s.tbt),
                str(row.prefill_count),
                str(row.decode_count),
            ]
            fh.write(",".join(cells) + "\n")


def _cell(value: float) -> str:
    return repr(float(value))


def _quote(text: str) -> str:
    if "," in text or '"' in text:
        return '"' + text.replace('"', '""') + '"'
    return text
