"""Deterministic simulator and control plane for autoscaling P/D-disaggregated LLM serving."""

from .errors import (
    AtomicPlacementFailed,
    ConfigError,
    GapInSchedule,
    HetscaleError,
    InsufficientCapacity,
    InvalidConfig,
    InvalidInput,
    NoFeasibleRatio,
    OutOfRange,
    ParseError,
    RangeError,
)
from .topology import (
    GpuType,
    Level,
    NodeSpec,
    RdmaSubgroup,
    SubgroupTier,
    TopologyTree,
    build_tree,
    classify_subgroups,
    load_cluster,
    save_cluster,
)
from .workload import (
    TracePoint,
    WorkloadTrace,
    demand_at,
    gen_diurnal_trace,
    load_trace,
    peak_tick,
    save_trace,
)
from .servicesim import (
    Instance,
    InstanceState,
    MetricsSample,
    Role,
    ServiceProfile,
    effective_capacity,
    make_reference_instances,
    step_metrics,
)
from .policy import (
    CurationResult,
    PolicyConfig,
    PolicyKind,
    RatioPoint,
    ScaleAction,
    ScalingDecision,
    ScheduleInterval,
    anti_flap_filter,
    apply_pd_ratio,
    curate_policy,
    feedback_decide,
    format_ratio,
    parse_ratio,
    periodic_decide,
    pressure_test,
    proportional_decide,
    sweep_pd_ratios,
)
from .scheduler import (
    AffinityScope,
    Allocation,
    ClusterState,
    DeploymentGroup,
    PreScheduler,
    ScalingRequest,
    ServiceAffinity,
    ServiceSchedEntry,
)
from .driver import (
    RunConfig,
    ServiceConfig,
    SimReport,
    compare_policies,
    emit_report,
    load_config,
    run_simulation,
    static_baseline_config,
)

__version__ = "0.1.0"

__all__ = [
    "AffinityScope",
    "Allocation",
    "AtomicPlacementFailed",
    "ClusterState",
    "ConfigError",
    "CurationResult",
    "DeploymentGroup",
    "GapInSchedule",
    "GpuType",
    "HetscaleError",
    "Instance",
    "InstanceState",
    "InsufficientCapacity",
    "InvalidConfig",
    "InvalidInput",
    "Level",
    "MetricsSample",
    "NoFeasibleRatio",
    "NodeSpec",
    "OutOfRange",
    "ParseError",
    "PolicyConfig",
    "PolicyKind",
    "PreScheduler",
    "RangeError",
    "RatioPoint",
    "RdmaSubgroup",
    "Role",
    "RunConfig",
    "ScaleAction",
    "ScalingDecision",
    "ScalingRequest",
    "ScheduleInterval",
    "ServiceAffinity",
    "ServiceConfig",
    "ServiceProfile",
    "ServiceSchedEntry",
    "SimReport",
    "SubgroupTier",
    "TopologyTree",
    "TracePoint",
    "WorkloadTrace",
    "anti_flap_filter",
    "apply_pd_ratio",
    "build_tree",
    "classify_subgroups",
    "compare_policies",
    "curate_policy",
    "demand_at",
    "effective_capacity",
    "emit_report",
    "feedback_decide",
    "format_ratio",
    "gen_diurnal_trace",
    "load_cluster",
    "load_config",
    "load_trace",
    "make_reference_instances",
    "parse_ratio",
    "peak_tick",
    "periodic_decide",
    "pressure_test",
    "proportional_decide",
    "run_simulation",
    "save_cluster",
    "save_trace",
    "static_baseline_config",
    "step_metrics",
    "sweep_pd_ratios",
]
