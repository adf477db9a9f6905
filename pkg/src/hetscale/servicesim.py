"""Phenomenological service model for disaggregated prefill/decode serving.

Prefill is compute-bound and drives TTFT; decode is memory-bandwidth-bound and
drives TBT. Metrics derive from per-role utilization rho = demand / capacity
(clipped to [0, RHO_MAX]):

* prefill_gpu_util = rho_p                 prefill_sm_act = 0.85 * rho_p
* decode_gpu_util  = floor + (1-floor)*rho_d
* decode_sm_act    = 0.5*floor + (1 - 0.5*floor) * rho_d
* ttft = ttft_base * placement_penalty / max(eps, 1 - rho_p)
* tbt  = tbt_base / max(eps, 1 - rho_d)

The decode utilization floor models always-resident KV cache and scheduler
polling: decode GPU utilization stays high even when token throughput is low,
which is exactly why it makes a poor scale-in signal.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import InvalidInput
from .topology import GpuType

RHO_MAX = 0.99
EPS = 1e-9
CROSS_S2_PENALTY = 1.25


class Role(str, enum.Enum):
    PREFILL = "prefill"
    DECODE = "decode"


class InstanceState(str, enum.Enum):
    STARTING = "starting"
    READY = "ready"
    SOFT_DRAINED = "soft_drained"
    TERMINATED = "terminated"


@dataclass(frozen=True)
class ServiceProfile:
    """Capacities are tokens/s per instance on the reference GPU (score 1.0)."""

    prefill_capacity: float
    decode_capacity: float
    ttft_base: float
    tbt_base: float
    slo_ttft: float
    slo_tbt: float
    decode_util_floor: float = 0.75
    gpus_per_prefill_instance: int = 4
    gpus_per_decode_instance: int = 4

    def __post_init__(self) -> None:
        if self.prefill_capacity <= 0 or self.decode_capacity <= 0:
            raise InvalidInput("per-instance capacities must be > 0")
        if self.ttft_base <= 0 or self.tbt_base <= 0:
            raise InvalidInput("base latencies must be > 0")
        if self.slo_ttft <= self.ttft_base or self.slo_tbt <= self.tbt_base:
            raise InvalidInput("SLO targets must exceed base latencies")
        if not 0.0 <= self.decode_util_floor < 1.0:
            raise InvalidInput("decode_util_floor must be within [0, 1)")
        if self.gpus_per_prefill_instance < 1 or self.gpus_per_decode_instance < 1:
            raise InvalidInput("instances need at least one GPU")

    def gpus_for(self, role: Role) -> int:
        return self.gpus_per_prefill_instance if role is Role.PREFILL else self.gpus_per_decode_instance

    def capacity_for(self, role: Role) -> float:
        return self.prefill_capacity if role is Role.PREFILL else self.decode_capacity


@dataclass
class Instance:
    """One serving instance. Only Ready-and-registered instances carry load."""

    instance_id: int
    role: Role
    gpu_type: GpuType
    state: InstanceState = InstanceState.STARTING
    registered: bool = False
    start_tick: int = 0
    service_id: str = ""
    group_id: str = ""
    node_id: str = ""
    gpus: int = 0

    @property
    def serving(self) -> bool:
        return self.state is InstanceState.READY and self.registered

    @property
    def holds_resources(self) -> bool:
        return self.state is not InstanceState.TERMINATED


@dataclass(frozen=True)
class MetricsSample:
    t: int
    prefill_tps: float
    decode_tps: float
    cache_missed_prefill_tps: float
    prefill_gpu_util: float
    decode_gpu_util: float
    prefill_sm_act: float
    decode_sm_act: float
    ttft: float
    tbt: float

    def value(self, metric: str) -> float:
        try:
            return getattr(self, metric)
        except AttributeError:
            raise InvalidInput(f"unknown metric {metric!r}") from None


METRIC_NAMES = (
    "prefill_tps",
    "decode_tps",
    "cache_missed_prefill_tps",
    "prefill_gpu_util",
    "decode_gpu_util",
    "prefill_sm_act",
    "decode_sm_act",
    "ttft",
    "tbt",
)
RATE_METRICS = frozenset({"prefill_tps", "decode_tps", "cache_missed_prefill_tps"})
LEVEL_METRICS = frozenset({"prefill_gpu_util", "decode_gpu_util", "prefill_sm_act", "decode_sm_act"})
LATENCY_METRICS = frozenset({"ttft", "tbt"})


def effective_capacity(
    instances: Iterable[Instance], role: Role, profile: ServiceProfile, reference_score: float = 1.0
) -> float:
    """Serving capacity of one role, hardware-scaled.

    Prefill capacity scales with compute score, decode with memory-bandwidth
    score, both relative to the reference device.
    """
    total = 0.0
    base = profile.capacity_for(role)
    for inst in instances:
        if inst.role is not role or not inst.serving:
            continue
        score = inst.gpu_type.compute_score if role is Role.PREFILL else inst.gpu_type.mem_bw_score
        total += base * score / reference_score
    return total


def kv_transfer_penalty(pair_cross_s2: Sequence[bool]) -> float:
    """TTFT multiplier from prefill->decode KV transfer placement.

    Each prefill-decode pair contributes 1.0 when co-located under one S2 and
    CROSS_S2_PENALTY when the transfer crosses S2 boundaries; the result is the
    mean over pairs. An empty pairing means no transfer penalty.
    """
    flags = list(pair_cross_s2)
    if not flags:
        return 1.0
    return cross_s2_penalty(sum(flags) / len(flags))


def cross_s2_penalty(cross_fraction: float) -> float:
    if not 0.0 <= cross_fraction <= 1.0:
        raise InvalidInput("cross fraction must be within [0, 1]")
    return 1.0 + (CROSS_S2_PENALTY - 1.0) * cross_fraction


def step_metrics(
    profile: ServiceProfile,
    demand: tuple[float, float],
    instances: Iterable[Instance],
    placement_penalty: float = 1.0,
    *,
    kv_hit_rate: float = 0.0,
    t: int = 0,
) -> MetricsSample:
    """One tick of the closed-form service model.

    ``demand`` is (cache-missed prefill token rate, decode token rate).
    ``prefill_tps`` reports raw input tokens including cache hits; with a hit
    rate of 1.0 no prefill compute happens and the raw figure is reported as 0.
    """
    prefill_demand, decode_demand = demand
    if prefill_demand < 0 or decode_demand < 0:
        raise InvalidInput("demand must be non-negative")
    if placement_penalty < 1.0:
        raise InvalidInput("placement penalty is a multiplier >= 1")
    if not 0.0 <= kv_hit_rate <= 1.0:
        raise InvalidInput("kv_hit_rate must be within [0, 1]")

    insts = list(instances)
    cap_p = effective_capacity(insts, Role.PREFILL, profile)
    cap_d = effective_capacity(insts, Role.DECODE, profile)

    rho_p = _rho(prefill_demand, cap_p)
    rho_d = _rho(decode_demand, cap_d)
    served_p = min(prefill_demand, cap_p)
    served_d = min(decode_demand, cap_d)

    floor = profile.decode_util_floor
    return MetricsSample(
        t=t,
        prefill_tps=served_p / (1.0 - kv_hit_rate) if kv_hit_rate < 1.0 else 0.0,
        decode_tps=served_d,
        cache_missed_prefill_tps=served_p,
        prefill_gpu_util=rho_p,
        decode_gpu_util=floor + (1.0 - floor) * rho_d,
        prefill_sm_act=0.85 * rho_p,
        decode_sm_act=0.5 * floor + (1.0 - 0.5 * floor) * rho_d,
        ttft=profile.ttft_base * placement_penalty / max(EPS, 1.0 - rho_p),
        tbt=profile.tbt_base / max(EPS, 1.0 - rho_d),
    )


def _rho(demand: float, capacity: float) -> float:
    if capacity <= 0.0:
        return RHO_MAX if demand > 0 else 0.0
    return min(RHO_MAX, max(0.0, demand / capacity))


def advance_lifecycle(
    instances: Iterable[Instance], t: int, startup_ticks: Mapping[Role, int]
) -> list[Instance]:
    """Promote Starting instances to Ready once their role's startup time elapsed.

    Registration is owned by the scheduler's discovery gate, not flipped here.
    Terminated is absorbing.
    """
    insts = list(instances)
    for inst in insts:
        if inst.state is InstanceState.STARTING and t - inst.start_tick >= startup_ticks[inst.role]:
            inst.state = InstanceState.READY
    return insts


def count_role(instances: Iterable[Instance], role: Role, *, serving_only: bool = False) -> int:
    return sum(
        1
        for inst in instances
        if inst.role is role
        and (inst.serving if serving_only else inst.holds_resources)
    )


def make_reference_instances(
    prefill: int, decode: int, gpu_type: GpuType | None = None, profile: ServiceProfile | None = None
) -> list[Instance]:
    """Synthetic Ready+registered fleet, used by capacity planning and tests."""
    gt = gpu_type or GpuType(name="reference")
    out: list[Instance] = []
    for i in range(prefill):
        out.append(
            Instance(
                instance_id=i,
                role=Role.PREFILL,
                gpu_type=gt,
                state=InstanceState.READY,
                registered=True,
                gpus=profile.gpus_per_prefill_instance if profile else 0,
            )
        )
    for i in range(decode):
        out.append(
            Instance(
                instance_id=prefill + i,
                role=Role.DECODE,
                gpu_type=gt,
                state=InstanceState.READY,
                registered=True,
                gpus=profile.gpus_per_decode_instance if profile else 0,
            )
        )
    return out
