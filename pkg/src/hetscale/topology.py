"""Hierarchical cluster topology with virtual free-capacity accounting.

The physical hierarchy is VDC -> cluster -> S2 -> S1 -> S0 -> node -> GPUs.
A :class:`TopologyTree` is built fresh at the start of every scheduling cycle;
within a cycle the scheduler only ever *deducts* capacity (virtual assignment).
Released resources become visible at the next rebuild, never mid-cycle.

RDMA subgroups partition the S1/S2 switches into priority tiers:

* ``LOW`` — every GPU under the subgroup's switches is a single type.
* ``MEDIUM`` — the S2 spans several types, but each member S1 is single-type.
* ``HIGH`` — a single S1 that directly spans two or more GPU types.

Heterogeneous S1s are always extracted into High-tier subgroups before their
parent S2 is classified over the remaining homogeneous S1s.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

from .errors import (
    DuplicateNode,
    InconsistentHierarchy,
    InsufficientCapacity,
    InvalidInput,
    ParseError,
    RangeError,
)

CLUSTER_FILE_FIELDS = ("node_id", "gpu_type", "gpu_count", "s0", "s1", "s2", "cluster", "vdc")


class Level(str, Enum):
    """Aggregation levels above the node."""

    S0 = "s0"
    S1 = "s1"
    S2 = "s2"
    CLUSTER = "cluster"
    VDC = "vdc"


class SubgroupTier(int, Enum):
    """Consumption priority of an RDMA subgroup (lower is consumed first)."""

    LOW = 0
    MEDIUM = 1
    HIGH = 2


@dataclass(frozen=True)
class GpuType:
    """A GPU model with scores relative to a reference device (score 1.0)."""

    name: str
    compute_score: float = 1.0
    mem_bw_score: float = 1.0
    hbm_capacity_gb: float = 96.0

    def __post_init__(self) -> None:
        if not self.name:
            raise InvalidInput("gpu type name must be non-empty")
        if self.compute_score <= 0 or self.mem_bw_score <= 0 or self.hbm_capacity_gb <= 0:
            raise InvalidInput(f"gpu type {self.name!r} scores must be positive")


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    gpu_type: GpuType
    gpu_count: int
    s0_id: str
    s1_id: str
    s2_id: str
    cluster_id: str
    vdc_id: str

    def __post_init__(self) -> None:
        if self.gpu_count < 1:
            raise InvalidInput(f"node {self.node_id!r}: gpu_count must be >= 1")


@dataclass(frozen=True)
class RdmaSubgroup:
    """A tiered collection of switches that placements are confined to."""

    subgroup_id: str
    tier: SubgroupTier
    s2_id: str
    member_switches: tuple[str, ...]
    s1_ids: tuple[str, ...]
    gpu_types_present: frozenset[str]

    def sort_key(self) -> tuple[int, str]:
        return (int(self.tier), self.subgroup_id)


_PARENT_LEVEL = {
    Level.S0: Level.S1,
    Level.S1: Level.S2,
    Level.S2: Level.CLUSTER,
    Level.CLUSTER: Level.VDC,
}


class TopologyTree:
    """Free-capacity view of a cluster, keyed by node and by (level, switch, type).

    Counters only ever decrease after construction; a new tree must be built to
    observe released capacity.
    """

    def __init__(self, nodes: Iterable[NodeSpec]):
        specs = list(nodes)
        if not specs:
            raise InvalidInput("cannot build a topology from an empty node list")
        self.nodes: dict[str, NodeSpec] = {}
        self._free: dict[str, int] = {}
        self._parents: dict[str, tuple[tuple[Level, str], ...]] = {}
        # (level, id) -> set of child ids one level down; leaves map S0 -> node ids.
        self._children: dict[tuple[Level, str], set[str]] = {}
        self._agg_free: dict[tuple[Level, str, str], int] = {}
        self._agg_capacity: dict[tuple[Level, str, str], int] = {}
        self._level_parent: dict[tuple[Level, str], tuple[Level, str] | None] = {}
        self._node_ids_under: dict[tuple[Level, str], set[str]] = {}

        for spec in specs:
            if spec.node_id in self.nodes:
                raise DuplicateNode(f"node {spec.node_id!r} appears more than once")
            chain = (
                (Level.S0, spec.s0_id),
                (Level.S1, spec.s1_id),
                (Level.S2, spec.s2_id),
                (Level.CLUSTER, spec.cluster_id),
                (Level.VDC, spec.vdc_id),
            )
            for child, parent in zip(chain, chain[1:]):
                known = self._level_parent.get(child)
                if known is not None and known != parent:
                    raise InconsistentHierarchy(
                        f"{child[0].value} {child[1]!r} maps to both "
                        f"{known[1]!r} and {parent[1]!r}"
                    )
                self._level_parent[child] = parent
                self._children.setdefault(parent, set()).add(child[1])
            self._level_parent.setdefault(chain[-1], None)
            self._children.setdefault((Level.S0, spec.s0_id), set()).add(spec.node_id)

            self.nodes[spec.node_id] = spec
            self._free[spec.node_id] = spec.gpu_count
            self._parents[spec.node_id] = chain
            for level, switch_id in chain:
                key = (level, switch_id, spec.gpu_type.name)
                self._agg_free[key] = self._agg_free.get(key, 0) + spec.gpu_count
                self._agg_capacity[key] = self._agg_capacity.get(key, 0) + spec.gpu_count
                self._node_ids_under.setdefault((level, switch_id), set()).add(spec.node_id)

    # -- queries -----------------------------------------------------------

    def free_gpus(self, node_id: str) -> int:
        return self._free[node_id]

    def free_under(self, level: Level, switch_id: str, gpu_type: str | None = None) -> int:
        if gpu_type is not None:
            return self._agg_free.get((level, switch_id, gpu_type), 0)
        return sum(
            free for (lvl, sid, _), free in self._agg_free.items()
            if lvl is level and sid == switch_id
        )

    def capacity_under(self, level: Level, switch_id: str, gpu_type: str | None = None) -> int:
        if gpu_type is not None:
            return self._agg_capacity.get((level, switch_id, gpu_type), 0)
        return sum(
            cap for (lvl, sid, _), cap in self._agg_capacity.items()
            if lvl is level and sid == switch_id
        )

    def switch_ids(self, level: Level) -> list[str]:
        return sorted({sid for (lvl, sid) in self._level_parent if lvl is level})

    def children_of(self, level: Level, switch_id: str) -> list[str]:
        return sorted(self._children.get((level, switch_id), ()))

    def nodes_under(self, level: Level, switch_id: str) -> list[str]:
        return sorted(self._node_ids_under.get((level, switch_id), ()))

    def gpu_types_under(self, level: Level, switch_id: str) -> frozenset[str]:
        """Hardware composition under a switch, independent of occupancy."""
        return frozenset(
            self.nodes[nid].gpu_type.name
            for nid in self._node_ids_under.get((level, switch_id), ())
        )

    def ancestors(self, node_id: str) -> tuple[tuple[Level, str], ...]:
        return self._parents[node_id]

    # -- mutation ----------------------------------------------------------

    def virtual_assign(self, node_id: str, gpus: int) -> None:
        """Deduct ``gpus`` from a node and every ancestor aggregate.

        Raises :class:`InsufficientCapacity` and leaves the tree unchanged when
        the node has fewer free GPUs than requested. Counters never increase.
        """
        if node_id not in self.nodes:
            raise InvalidInput(f"unknown node {node_id!r}")
        if gpus < 0:
            raise InvalidInput("cannot assign a negative GPU count")
        if gpus > self._free[node_id]:
            raise InsufficientCapacity(
                f"node {node_id!r} has {self._free[node_id]} free GPUs, wanted {gpus}"
            )
        self._free[node_id] -= gpus
        type_name = self.nodes[node_id].gpu_type.name
        for level, switch_id in self._parents[node_id]:
            self._agg_free[(level, switch_id, type_name)] -= gpus


def build_tree(nodes: Iterable[NodeSpec]) -> TopologyTree:
    """Construct a fresh fully-free topology tree from node specs."""
    return TopologyTree(nodes)


def classify_subgroups(tree: TopologyTree) -> list[RdmaSubgroup]:
    """Partition all S1/S2 switches into tiered RDMA subgroups.

    Every heterogeneous S1 becomes its own High-tier subgroup. Each S2 then
    forms one subgroup with its remaining homogeneous S1s: Low when they hold a
    single GPU type, Medium otherwise. An S2 whose S1s were all extracted keeps
    a (placement-empty) Medium subgroup so the partition stays total.

    The result is sorted by subgroup_id and deterministic for a given tree.
    """
    subgroups: list[RdmaSubgroup] = []
    for s2_id in tree.switch_ids(Level.S2):
        s1_ids = tree.children_of(Level.S2, s2_id)
        hetero = [s1 for s1 in s1_ids if len(tree.gpu_types_under(Level.S1, s1)) >= 2]
        homo = [s1 for s1 in s1_ids if s1 not in hetero]
        for s1_id in hetero:
            types = tree.gpu_types_under(Level.S1, s1_id)
            subgroups.append(
                RdmaSubgroup(
                    subgroup_id=f"s1:{s1_id}",
                    tier=SubgroupTier.HIGH,
                    s2_id=s2_id,
                    member_switches=(s1_id,),
                    s1_ids=(s1_id,),
                    gpu_types_present=types,
                )
            )
        if homo:
            types = frozenset().union(*(tree.gpu_types_under(Level.S1, s1) for s1 in homo))
            tier = SubgroupTier.LOW if len(types) <= 1 else SubgroupTier.MEDIUM
        else:
            types = tree.gpu_types_under(Level.S2, s2_id)
            tier = SubgroupTier.MEDIUM
        subgroups.append(
            RdmaSubgroup(
                subgroup_id=f"s2:{s2_id}",
                tier=tier,
                s2_id=s2_id,
                member_switches=(s2_id, *homo),
                s1_ids=tuple(homo),
                gpu_types_present=types,
            )
        )
    return sorted(subgroups, key=lambda sg: sg.subgroup_id)


def load_cluster(path: str, gpu_types: Mapping[str, GpuType]) -> list[NodeSpec]:
    """Read a cluster description CSV (one record per node).

    Header must contain exactly ``node_id,gpu_type,gpu_count,s0,s1,s2,cluster,vdc``;
    unknown fields are rejected. ``gpu_type`` values must resolve in ``gpu_types``.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty cluster file", 1) from None
        header = [h.strip() for h in header]
        unknown = set(header) - set(CLUSTER_FILE_FIELDS)
        if unknown:
            raise ParseError(f"unknown fields {sorted(unknown)}", 1)
        missing = set(CLUSTER_FILE_FIELDS) - set(header)
        if missing:
            raise ParseError(f"missing fields {sorted(missing)}", 1)
        col = {name: header.index(name) for name in CLUSTER_FILE_FIELDS}

        specs: list[NodeSpec] = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
            type_name = row[col["gpu_type"]].strip()
            if type_name not in gpu_types:
                raise RangeError("gpu_type", f"unknown GPU type {type_name!r}", lineno)
            try:
                count = int(row[col["gpu_count"]])
            except ValueError:
                raise ParseError(f"gpu_count {row[col['gpu_count']]!r} is not an integer", lineno) from None
            if count < 1:
                raise RangeError("gpu_count", f"must be >= 1, got {count}", lineno)
            specs.append(
                NodeSpec(
                    node_id=row[col["node_id"]].strip(),
                    gpu_type=gpu_types[type_name],
                    gpu_count=count,
                    s0_id=row[col["s0"]].strip(),
                    s1_id=row[col["s1"]].strip(),
                    s2_id=row[col["s2"]].strip(),
                    cluster_id=row[col["cluster"]].strip(),
                    vdc_id=row[col["vdc"]].strip(),
                )
            )
    if not specs:
        raise InvalidInput(f"cluster file {path!r} defines no nodes")
    return specs


def save_cluster(specs: Iterable[NodeSpec], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CLUSTER_FILE_FIELDS)
        for spec in specs:
            writer.writerow(
                [
                    spec.node_id,
                    spec.gpu_type.name,
                    spec.gpu_count,
                    spec.s0_id,
                    spec.s1_id,
                    spec.s2_id,
                    spec.cluster_id,
                    spec.vdc_id,
                ]
            )
