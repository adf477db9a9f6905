from __future__ import annotations

import pytest

from hetscale.topology import GpuType, NodeSpec

H800 = GpuType("h800", compute_score=1.0, mem_bw_score=1.0)
H20 = GpuType("h20", compute_score=0.35, mem_bw_score=1.35)
GPU_TYPES = {"h800": H800, "h20": H20}


def node(
    node_id: str,
    *,
    gpu_type: GpuType = H800,
    gpu_count: int = 8,
    s0: str = "s0-a",
    s1: str = "s1-a",
    s2: str = "s2-a",
    cluster: str = "c0",
    vdc: str = "vdc0",
) -> NodeSpec:
    return NodeSpec(
        node_id=node_id,
        gpu_type=gpu_type,
        gpu_count=gpu_count,
        s0_id=s0,
        s1_id=s1,
        s2_id=s2,
        cluster_id=cluster,
        vdc_id=vdc,
    )


def grid_nodes(
    *,
    s2s: int = 2,
    s1s_per_s2: int = 2,
    s0s_per_s1: int = 2,
    nodes_per_s0: int = 2,
    gpu_count: int = 8,
    gpu_type: GpuType = H800,
) -> list[NodeSpec]:
    """A regular homogeneous hierarchy: handy default cluster for tests."""
    out = []
    for a in range(s2s):
        for b in range(s1s_per_s2):
            for c in range(s0s_per_s1):
                for d in range(nodes_per_s0):
                    out.append(
                        node(
                            f"n{a}{b}{c}{d}",
                            gpu_type=gpu_type,
                            gpu_count=gpu_count,
                            s0=f"s0-{a}{b}{c}",
                            s1=f"s1-{a}{b}",
                            s2=f"s2-{a}",
                        )
                    )
    return out


@pytest.fixture
def small_cluster() -> list[NodeSpec]:
    return grid_nodes()
