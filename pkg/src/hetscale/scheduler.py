"""Priority-aware scheduling of coordinated prefill/decode scaling requests.

Each cycle works against a freshly built topology tree with current holdings
virtually deducted. Scale-out requests are served strictly by descending
service priority; candidate subgroups are filtered by affinity and consumed
lowest tier first, so cheap homogeneous pools are used up before scarce
heterogeneous ones. Both roles of a request are placed in a single group in one
pass or not at all — a request can be shorted, but never half-placed.

Scale-in is soft: instances are drained (stop serving, keep their GPUs) and
only terminate after an observation window with no SLO breach; a breach
reinstates them with zero startup delay. Scale-in targets high-tier groups
first to hand scarce pools back quickly.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import AtomicPlacementFailed, InvalidInput
from .policy import ScaleAction
from .servicesim import Instance, InstanceState, Role, ServiceProfile
from .topology import (
    Level,
    NodeSpec,
    RdmaSubgroup,
    SubgroupTier,
    TopologyTree,
    build_tree,
    classify_subgroups,
)


class AffinityScope(str, enum.Enum):
    SAME_S1 = "same_s1"
    SAME_S2 = "same_s2"
    SAME_CLUSTER = "same_cluster"


class GroupState(str, enum.Enum):
    ACTIVE = "active"
    DRAINING = "draining"


@dataclass(frozen=True)
class ServiceAffinity:
    scope: AffinityScope
    prefill_gpu_type: str
    decode_gpu_type: str

    @property
    def role_types(self) -> dict[Role, str]:
        return {Role.PREFILL: self.prefill_gpu_type, Role.DECODE: self.decode_gpu_type}


@dataclass(frozen=True)
class ScalingRequest:
    service_id: str
    request_type: ScaleAction
    prefill_delta: int
    decode_delta: int
    priority: int
    affinity: ServiceAffinity

    def __post_init__(self) -> None:
        if self.prefill_delta < 0 or self.decode_delta < 0:
            raise InvalidInput("deltas must be >= 0")
        if self.request_type is ScaleAction.NO_CHANGE:
            raise InvalidInput("requests carry a scale direction")


@dataclass
class DeploymentGroup:
    """A service's prefill+decode roles bound to one RDMA subgroup."""

    group_id: str
    service_id: str
    affinity_scope: AffinityScope
    bound_subgroup: str
    tier: SubgroupTier
    bound_s1: str | None = None
    prefill_instances: list[int] = field(default_factory=list)
    decode_instances: list[int] = field(default_factory=list)
    state: GroupState = GroupState.ACTIVE


@dataclass(frozen=True)
class Allocation:
    """Outcome of one request in one cycle; assigned may fall short of asked."""

    service_id: str
    request_type: ScaleAction
    group_id: str | None
    subgroup_id: str | None
    prefill_assigned: int
    decode_assigned: int
    prefill_requested: int
    decode_requested: int
    note: str = ""

    @property
    def shortfall(self) -> bool:
        return (
            self.prefill_assigned < self.prefill_requested
            or self.decode_assigned < self.decode_requested
        )


@dataclass(frozen=True)
class ServiceSchedEntry:
    profile: ServiceProfile
    affinity: ServiceAffinity
    priority: int = 1
    gate_tolerance: float = 0.0
    drain_window: int = 5
    startup_ticks: Mapping[Role, int] = field(
        default_factory=lambda: {Role.PREFILL: 2, Role.DECODE: 3}
    )


@dataclass
class _DrainPlan:
    service_id: str
    instance_ids: list[int]
    start_tick: int


class ClusterState:
    """Nodes plus every instance/group the scheduler has ever materialized."""

    def __init__(self, nodes: Sequence[NodeSpec]):
        if not nodes:
            raise InvalidInput("cluster state needs at least one node")
        self.nodes: list[NodeSpec] = list(nodes)
        self.node_map: dict[str, NodeSpec] = {n.node_id: n for n in self.nodes}
        self.instances: dict[int, Instance] = {}
        self.groups: dict[str, DeploymentGroup] = {}
        self._next_instance = itertools.count(1)
        self._next_group = itertools.count(1)

    def new_instance_id(self) -> int:
        return next(self._next_instance)

    def new_group_id(self, service_id: str) -> str:
        return f"{service_id}/g{next(self._next_group):03d}"

    def live_instances(self) -> list[Instance]:
        return [i for i in self.instances.values() if i.holds_resources]

    def service_instances(self, service_id: str) -> list[Instance]:
        return [i for i in self.instances.values() if i.service_id == service_id]

    def service_groups(self, service_id: str) -> list[DeploymentGroup]:
        return sorted(
            (g for g in self.groups.values() if g.service_id == service_id),
            key=lambda g: g.group_id,
        )

    def held_gpus(self) -> int:
        return sum(i.gpus for i in self.instances.values() if i.holds_resources)


class PreScheduler:
    """Control-plane scheduler over one shared cluster."""

    def __init__(self, state: ClusterState, services: Mapping[str, ServiceSchedEntry]):
        self.state = state
        self.services = dict(services)
        self._drains: dict[str, list[_DrainPlan]] = {name: [] for name in services}
        self._tier_tree: TopologyTree | None = None

    # -- cycle -------------------------------------------------------------

    def construct_tree_view(self) -> tuple[TopologyTree, list[RdmaSubgroup]]:
        """Fresh tree for this cycle with all current holdings deducted."""
        tree = build_tree(self.state.nodes)
        for inst in self.state.live_instances():
            if inst.node_id:
                tree.virtual_assign(inst.node_id, inst.gpus)
        return tree, classify_subgroups(tree)

    def schedule_cycle(
        self,
        requests: Sequence[ScalingRequest],
        now: int,
        tree: TopologyTree | None = None,
        subgroups: Sequence[RdmaSubgroup] | None = None,
    ) -> list[Allocation]:
        """Serve requests by descending priority against one tree view.

        Capacity released by scale-in during the cycle is invisible until the
        next cycle's rebuild.
        """
        if tree is None or subgroups is None:
            tree, subgroups = self.construct_tree_view()
        ordered = sorted(requests, key=lambda r: (-r.priority, r.service_id))
        allocations: list[Allocation] = []
        for req in ordered:
            if req.request_type is ScaleAction.SCALE_OUT:
                allocations.append(self._scale_out(req, tree, subgroups, now))
            else:
                allocations.append(self._scale_in(req, now))
        return allocations

    # -- scale-out ---------------------------------------------------------

    def _scale_out(
        self,
        req: ScalingRequest,
        tree: TopologyTree,
        subgroups: Sequence[RdmaSubgroup],
        now: int,
    ) -> Allocation:
        try:
            group, subgroup_id, placements = self.expand_or_create(req, tree, subgroups)
        except AtomicPlacementFailed as exc:
            return Allocation(
                service_id=req.service_id,
                request_type=req.request_type,
                group_id=None,
                subgroup_id=None,
                prefill_assigned=0,
                decode_assigned=0,
                prefill_requested=req.prefill_delta,
                decode_requested=req.decode_delta,
                note=str(exc),
            )
        entry = self.services[req.service_id]
        for role, node_ids in placements.items():
            gpus = entry.profile.gpus_for(role)
            for node_id in node_ids:
                tree.virtual_assign(node_id, gpus)
                inst = Instance(
                    instance_id=self.state.new_instance_id(),
                    role=role,
                    gpu_type=self.state.node_map[node_id].gpu_type,
                    state=InstanceState.STARTING,
                    registered=False,
                    start_tick=now,
                    service_id=req.service_id,
                    group_id=group.group_id,
                    node_id=node_id,
                    gpus=gpus,
                )
                self.state.instances[inst.instance_id] = inst
                if role is Role.PREFILL:
                    group.prefill_instances.append(inst.instance_id)
                else:
                    group.decode_instances.append(inst.instance_id)
        return Allocation(
            service_id=req.service_id,
            request_type=req.request_type,
            group_id=group.group_id,
            subgroup_id=subgroup_id,
            prefill_assigned=req.prefill_delta,
            decode_assigned=req.decode_delta,
            prefill_requested=req.prefill_delta,
            decode_requested=req.decode_delta,
        )

    def expand_or_create(
        self,
        req: ScalingRequest,
        tree: TopologyTree,
        subgroups: Sequence[RdmaSubgroup],
    ) -> tuple[DeploymentGroup, str, dict[Role, list[str]]]:
        """Choose a group and a full both-role placement for a scale-out.

        Candidates are filtered by affinity and walked lowest tier first; at
        equal tier a subgroup holding an expandable group wins, then lexical
        subgroup id. Raises :class:`AtomicPlacementFailed` when no candidate
        fits both role deltas.
        """
        groups = [
            g
            for g in self.state.service_groups(req.service_id)
            if g.state is GroupState.ACTIVE
        ]
        bound = {g.bound_subgroup for g in groups}
        cands = [sg for sg in subgroups if self._compatible(sg, req.affinity)]
        cands.sort(key=lambda sg: (int(sg.tier), 0 if sg.subgroup_id in bound else 1, sg.subgroup_id))
        for sg in cands:
            for group in groups:
                if group.bound_subgroup != sg.subgroup_id:
                    continue
                placements = self._plan_pair(req, tree, sg, pinned_s1=group.bound_s1)
                if placements is not None:
                    return group, sg.subgroup_id, placements[0]
            planned = self._plan_pair(req, tree, sg, pinned_s1=None)
            if planned is not None:
                placements, chosen_s1 = planned
                group = DeploymentGroup(
                    group_id=self.state.new_group_id(req.service_id),
                    service_id=req.service_id,
                    affinity_scope=req.affinity.scope,
                    bound_subgroup=sg.subgroup_id,
                    tier=sg.tier,
                    bound_s1=chosen_s1,
                )
                self.state.groups[group.group_id] = group
                return group, sg.subgroup_id, placements
        raise AtomicPlacementFailed(
            f"no subgroup fits {req.prefill_delta}P+{req.decode_delta}D for {req.service_id!r}"
        )

    def _compatible(self, sg: RdmaSubgroup, affinity: ServiceAffinity) -> bool:
        """Type/scope filter; free capacity is checked at plan time."""
        needed = {affinity.prefill_gpu_type, affinity.decode_gpu_type}
        if not needed <= sg.gpu_types_present:
            return False
        if not sg.s1_ids:
            return False  # placement-empty remainder subgroup
        if affinity.scope is AffinityScope.SAME_S1:
            return any(self._s1_types(sg, s1) >= needed for s1 in sg.s1_ids)
        return True

    def _s1_types(self, sg: RdmaSubgroup, s1_id: str) -> set[str]:
        # Hardware composition is static for a run, so one lazily built tree serves.
        if self._tier_tree is None:
            self._tier_tree = build_tree(self.state.nodes)
        return set(self._tier_tree.gpu_types_under(Level.S1, s1_id))

    def _plan_pair(
        self,
        req: ScalingRequest,
        tree: TopologyTree,
        sg: RdmaSubgroup,
        pinned_s1: str | None,
    ) -> tuple[dict[Role, list[str]], str | None] | None:
        """Plan node placements for both role deltas without mutating the tree.

        Returns (placements, chosen_s1) or None when the pair does not fit.
        """
        entry = self.services[req.service_id]
        if req.affinity.scope is AffinityScope.SAME_S1:
            s1_options = [pinned_s1] if pinned_s1 else list(sg.s1_ids)
        else:
            s1_options = [None]
        for s1 in s1_options:
            if s1 is not None:
                node_pool = tree.nodes_under(Level.S1, s1)
            else:
                node_pool = sorted(
                    itertools.chain.from_iterable(
                        tree.nodes_under(Level.S1, member) for member in sg.s1_ids
                    )
                )
            pending: dict[str, int] = {}
            plan: dict[Role, list[str]] = {}
            ok = True
            for role, count in ((Role.PREFILL, req.prefill_delta), (Role.DECODE, req.decode_delta)):
                placed = self._plan_role(
                    tree,
                    node_pool,
                    req.affinity.role_types[role],
                    count,
                    entry.profile.gpus_for(role),
                    pending,
                )
                if placed is None:
                    ok = False
                    break
                plan[role] = placed
            if ok:
                return plan, s1
        return None

    @staticmethod
    def _plan_role(
        tree: TopologyTree,
        node_pool: Sequence[str],
        gpu_type: str,
        count: int,
        gpus_per_instance: int,
        pending: dict[str, int],
    ) -> list[str] | None:
        """First-fit over node ids in order; shares ``pending`` across roles."""
        placed: list[str] = []
        for node_id in node_pool:
            if len(placed) >= count:
                break
            if tree.nodes[node_id].gpu_type.name != gpu_type:
                continue
            free = tree.free_gpus(node_id) - pending.get(node_id, 0)
            while free >= gpus_per_instance and len(placed) < count:
                placed.append(node_id)
                pending[node_id] = pending.get(node_id, 0) + gpus_per_instance
                free -= gpus_per_instance
        return placed if len(placed) == count else None

    # -- scale-in ----------------------------------------------------------

    def _scale_in(self, req: ScalingRequest, now: int) -> Allocation:
        selections = self.scale_in_select(
            req.service_id, (req.prefill_delta, req.decode_delta)
        )
        drained: list[int] = []
        took_p = took_d = 0
        touched: set[str] = set()
        for group, instance_ids in selections:
            for iid in instance_ids:
                inst = self.state.instances[iid]
                inst.state = InstanceState.SOFT_DRAINED
                inst.registered = False
                drained.append(iid)
                if inst.role is Role.PREFILL:
                    took_p += 1
                else:
                    took_d += 1
            touched.add(group.group_id)
            if not self._active_ids(group):
                group.state = GroupState.DRAINING
        if drained:
            self._drains[req.service_id].append(
                _DrainPlan(service_id=req.service_id, instance_ids=drained, start_tick=now)
            )
        return Allocation(
            service_id=req.service_id,
            request_type=req.request_type,
            group_id=",".join(sorted(touched)) if touched else None,
            subgroup_id=None,
            prefill_assigned=took_p,
            decode_assigned=took_d,
            prefill_requested=req.prefill_delta,
            decode_requested=req.decode_delta,
        )

    def scale_in_select(
        self, service_id: str, deltas: tuple[int, int]
    ) -> list[tuple[DeploymentGroup, list[int]]]:
        """Pick instances to drain: high-tier groups first, newest instances first.

        Deducts both roles as available per group; when the deltas exceed what
        exists, everything available is deducted and the shortfall surfaces in
        the allocation.
        """
        rem = {Role.PREFILL: deltas[0], Role.DECODE: deltas[1]}
        groups = sorted(
            (g for g in self.state.service_groups(service_id) if g.state is GroupState.ACTIVE),
            key=lambda g: (-int(g.tier), g.group_id),
        )
        out: list[tuple[DeploymentGroup, list[int]]] = []
        for group in groups:
            if rem[Role.PREFILL] == 0 and rem[Role.DECODE] == 0:
                break
            chosen: list[int] = []
            for role in (Role.PREFILL, Role.DECODE):
                if rem[role] == 0:
                    continue
                actives = [
                    iid
                    for iid in self._role_ids(group, role)
                    if self.state.instances[iid].state
                    in (InstanceState.STARTING, InstanceState.READY)
                ]
                take = actives[-rem[role]:] if rem[role] <= len(actives) else actives
                chosen.extend(sorted(take, reverse=True))
                rem[role] -= len(take)
            if chosen:
                out.append((group, chosen))
        return out

    @staticmethod
    def _role_ids(group: DeploymentGroup, role: Role) -> list[int]:
        return group.prefill_instances if role is Role.PREFILL else group.decode_instances

    def _active_ids(self, group: DeploymentGroup) -> list[int]:
        return [
            iid
            for iid in (*group.prefill_instances, *group.decode_instances)
            if self.state.instances[iid].state
            in (InstanceState.STARTING, InstanceState.READY)
        ]

    # -- soft drain lifecycle ---------------------------------------------

    def observe_slo(self, service_id: str, now: int, breach: bool) -> tuple[list[int], list[int]]:
        """Advance drain plans one tick; returns (reinstated, terminated) ids.

        A breach reinstates every pending drained instance of the service to
        Ready-and-registered immediately (no startup delay); plans that survive
        their whole window terminate and release their GPUs at the next cycle's
        rebuild.
        """
        plans = self._drains.get(service_id, [])
        if not plans:
            return ([], [])
        entry = self.services[service_id]
        reinstated: list[int] = []
        terminated: list[int] = []
        keep: list[_DrainPlan] = []
        if breach:
            for plan in plans:
                for iid in plan.instance_ids:
                    inst = self.state.instances[iid]
                    inst.state = InstanceState.READY
                    inst.registered = True
                    reinstated.append(iid)
                    group = self.state.groups[inst.group_id]
                    if group.state is GroupState.DRAINING:
                        group.state = GroupState.ACTIVE
            self._drains[service_id] = []
            return (sorted(reinstated), [])
        for plan in plans:
            if now - plan.start_tick >= entry.drain_window:
                for iid in plan.instance_ids:
                    inst = self.state.instances[iid]
                    inst.state = InstanceState.TERMINATED
                    inst.registered = False
                    terminated.append(iid)
                    self._detach(inst)
            else:
                keep.append(plan)
        self._drains[service_id] = keep
        return ([], sorted(terminated))

    def soft_scale_in(self, service_id: str, instance_ids: Sequence[int], now: int) -> None:
        """Directly drain specific instances (API parity with scale-in requests)."""
        for iid in instance_ids:
            inst = self.state.instances[iid]
            inst.state = InstanceState.SOFT_DRAINED
            inst.registered = False
        if instance_ids:
            self._drains[service_id].append(
                _DrainPlan(service_id=service_id, instance_ids=list(instance_ids), start_tick=now)
            )

    def pending_drains(self, service_id: str) -> int:
        return sum(len(p.instance_ids) for p in self._drains.get(service_id, []))

    def _detach(self, inst: Instance) -> None:
        group = self.state.groups.get(inst.group_id)
        if group is None:
            return
        for id_list in (group.prefill_instances, group.decode_instances):
            if inst.instance_id in id_list:
                id_list.remove(inst.instance_id)

    # -- discovery gate ----------------------------------------------------

    def discovery_gate(
        self, group: DeploymentGroup, pd_ratio: float, tolerance: float | None = None
    ) -> list[int]:
        """Register ready instances while keeping the group's registered P/D
        ratio within tolerance of the target (plus integer-rounding slack).

        The over-represented role waits. Returns newly registered instance ids;
        already-registered instances are never unregistered here.
        """
        entry = self.services[group.service_id]
        tol = entry.gate_tolerance if tolerance is None else tolerance
        ready_unreg: dict[Role, list[int]] = {Role.PREFILL: [], Role.DECODE: []}
        reg = {Role.PREFILL: 0, Role.DECODE: 0}
        for role in (Role.PREFILL, Role.DECODE):
            for iid in self._role_ids(group, role):
                inst = self.state.instances[iid]
                if inst.state is not InstanceState.READY:
                    continue
                if inst.registered:
                    reg[role] += 1
                else:
                    ready_unreg[role].append(iid)
        add_p, add_d = _best_admissible_addition(
            reg[Role.PREFILL],
            reg[Role.DECODE],
            len(ready_unreg[Role.PREFILL]),
            len(ready_unreg[Role.DECODE]),
            pd_ratio,
            tol,
        )
        newly = sorted(ready_unreg[Role.PREFILL])[:add_p] + sorted(ready_unreg[Role.DECODE])[:add_d]
        for iid in newly:
            self.state.instances[iid].registered = True
        return newly


def ratio_admissible(prefill: int, decode: int, pd_ratio: float, tolerance: float) -> bool:
    """Is a registered (prefill, decode) pair within tolerance of the ratio?

    With zero tolerance this admits exactly the two integer roundings of
    decode * pd_ratio — the unavoidable rounding slack of ceil-anchored pairs.
    """
    if math.isinf(tolerance):
        return True
    if decode == 0:
        return prefill == 0
    target = decode * pd_ratio
    lo = math.floor(_snap_int(target * (1.0 - tolerance)))
    hi = math.ceil(_snap_int(target * (1.0 + tolerance)))
    return lo <= prefill <= hi


def _snap_int(x: float) -> float:
    # Defend floor/ceil against float noise like 0.3 * 10 = 2.9999999999999996.
    nearest = round(x)
    return float(nearest) if abs(x - nearest) < 1e-9 else x


def _best_admissible_addition(
    reg_p: int, reg_d: int, avail_p: int, avail_d: int, pd_ratio: float, tolerance: float
) -> tuple[int, int]:
    """Largest (add_p, add_d) keeping the new registered pair admissible.

    Ties prefer registering more decode (the anchor role), then more prefill.
    """
    best = (0, 0)
    best_key = (-1, -1, -1)
    for add_d in range(avail_d + 1):
        for add_p in range(avail_p + 1):
            if ratio_admissible(reg_p + add_p, reg_d + add_d, pd_ratio, tolerance):
                key = (add_p + add_d, add_d, add_p)
                if key > best_key:
                    best_key = key
                    best = (add_p, add_d)
    return best
