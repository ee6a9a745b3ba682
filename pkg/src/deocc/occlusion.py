"""Occlusion relation from depth evidence: pairwise ordering across shared
visible-mask boundaries, the directed occluder graph, cycle resolution, and
decomposition into depth layers (longest occluder-chain rule)."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ValidationError
from .scene import BinaryMask, DepthMap, mask_dilate

log = logging.getLogger(__name__)

A_OVER_B = "a_over_b"
B_OVER_A = "b_over_a"
NONE = "none"


class Verdict(str, Enum):
    a_over_b = A_OVER_B
    b_over_a = B_OVER_A
    none = NONE


@dataclass(frozen=True)
class Edge:
    src: int  # occluder
    dst: int  # occludee
    margin: float


@dataclass(frozen=True)
class OcclusionGraph:
    """Directed occluder -> occludee relation.  build_graph emits at most one
    edge per unordered pair; the type itself admits opposite-direction pairs
    (2-cycles) so break_cycles has something to resolve."""

    nodes: tuple[int, ...]
    edges: tuple[Edge, ...]

    def __post_init__(self):
        seen = set()
        for e in self.edges:
            if e.src == e.dst:
                raise ValidationError("self-edges are not allowed")
            if (e.src, e.dst) in seen:
                raise ValidationError(f"duplicate edge {e.src}->{e.dst}")
            seen.add((e.src, e.dst))

    def successors(self, v: int) -> list[int]:
        return [e.dst for e in self.edges if e.src == v]

    def in_degree(self, v: int) -> int:
        return sum(1 for e in self.edges if e.dst == v)

    def has_edge(self, src: int, dst: int) -> bool:
        return any(e.src == src and e.dst == dst for e in self.edges)

    def occluded_nodes(self) -> tuple[int, ...]:
        return tuple(v for v in self.nodes if self.in_degree(v) > 0)

    def to_json(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "edges": [{"from": e.src, "to": e.dst, "margin": e.margin} for e in self.edges],
        }


@dataclass(frozen=True)
class DepthLayering:
    layer_of: dict[int, int]
    num_layers: int

    def to_json(self) -> dict:
        return {"layers": {str(k): v for k, v in sorted(self.layer_of.items())},
                "num_layers": self.num_layers}

    def members(self, layer: int) -> list[int]:
        return sorted(v for v, l in self.layer_of.items() if l == layer)


def shared_band(visible_a: BinaryMask, visible_b: BinaryMask, band: int) -> np.ndarray:
    """The shared-boundary region: intersection of the two band dilations."""
    if band < 1:
        raise ValidationError("adjacency band must be >= 1")
    da = mask_dilate(visible_a, band).array
    db = mask_dilate(visible_b, band).array
    return da & db


def band_adjacent(visible_a: BinaryMask, visible_b: BinaryMask, band: int) -> bool:
    """True when the shared band is nonempty AND holds pixels of both masks,
    i.e. exactly when pairwise ordering has depth evidence to compare."""
    region = shared_band(visible_a, visible_b, band)
    if not region.any():
        return False
    return bool((visible_a.array & region).any()) and bool((visible_b.array & region).any())


def pairwise_evidence(visible_a: BinaryMask, visible_b: BinaryMask, depth: DepthMap,
                      band: int = 2, statistic: str = "mean",
                      tie_tol_frac: float = 1e-6) -> tuple[str, float]:
    """Order verdict plus the depth-difference margin backing it.

    Objects are compared over their visible pixels restricted to the shared
    band; the nearer one (smaller depth statistic) is the occluder.  Returns
    (none, 0.0) when not adjacent, when either side has no pixels in the
    band, or on a tie within tolerance.
    """
    if visible_a.empty() or visible_b.empty():
        return NONE, 0.0
    if (visible_a.array & visible_b.array).any():
        raise ValidationError("visible masks must be disjoint")
    region = shared_band(visible_a, visible_b, band)
    if not region.any():
        return NONE, 0.0
    pa = depth.array[visible_a.array & region]
    pb = depth.array[visible_b.array & region]
    if pa.size == 0 or pb.size == 0:
        return NONE, 0.0
    stat = np.mean if statistic == "mean" else np.median
    if statistic not in ("mean", "median"):
        raise ValidationError(f"unknown statistic {statistic!r}")
    va, vb = float(stat(pa)), float(stat(pb))
    drange = float(depth.array.max() - depth.array.min())
    tol = tie_tol_frac * drange
    diff = vb - va
    if abs(diff) <= tol:
        log.info("ambiguous pair: depth statistics tie within tolerance (%g vs %g)", va, vb)
        return NONE, 0.0
    return (A_OVER_B, abs(diff)) if diff > 0 else (B_OVER_A, abs(diff))


def pairwise_order(visible_a: BinaryMask, visible_b: BinaryMask, depth: DepthMap,
                   band: int = 2, statistic: str = "mean",
                   tie_tol_frac: float = 1e-6) -> str:
    verdict, _ = pairwise_evidence(visible_a, visible_b, depth, band, statistic, tie_tol_frac)
    return verdict


def build_graph(visible_masks: dict[int, BinaryMask], depth: DepthMap,
                band: int = 2, statistic: str = "mean",
                tie_tol_frac: float = 1e-6) -> OcclusionGraph:
    ids = sorted(visible_masks)
    if not ids:
        raise ValidationError("at least one object required")
    edges = []
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            verdict, margin = pairwise_evidence(visible_masks[a], visible_masks[b],
                                                depth, band, statistic, tie_tol_frac)
            if verdict == A_OVER_B:
                edges.append(Edge(a, b, margin))
            elif verdict == B_OVER_A:
                edges.append(Edge(b, a, margin))
    return OcclusionGraph(nodes=tuple(ids), edges=tuple(edges))


def _reachable(edges: list[Edge], src: int, dst: int) -> bool:
    adj: dict[int, list[int]] = {}
    for e in edges:
        adj.setdefault(e.src, []).append(e.dst)
    stack, seen = [src], set()
    while stack:
        v = stack.pop()
        if v == dst:
            return True
        if v in seen:
            continue
        seen.add(v)
        stack.extend(adj.get(v, ()))
    return False


def is_acyclic(graph: OcclusionGraph) -> bool:
    return not any(_reachable(list(graph.edges), e.dst, e.src) for e in graph.edges)


def break_cycles(graph: OcclusionGraph) -> OcclusionGraph:
    """Drop weakest-margin edges (ties by node ids) until the graph is a DAG."""
    edges = list(graph.edges)
    while True:
        cyclic = [e for e in edges if _reachable(edges, e.dst, e.src)]
        if not cyclic:
            return OcclusionGraph(nodes=graph.nodes, edges=tuple(edges))
        victim = min(cyclic, key=lambda e: (e.margin, e.src, e.dst))
        log.info("breaking cycle: removing edge %d->%d (margin %g)",
                 victim.src, victim.dst, victim.margin)
        edges.remove(victim)


def layering(graph: OcclusionGraph) -> DepthLayering:
    """layer(v) = longest occluder-chain length ending at v (sources at 0)."""
    indeg = {v: 0 for v in graph.nodes}
    for e in graph.edges:
        indeg[e.dst] += 1
    layer = {v: 0 for v in graph.nodes}
    queue = sorted(v for v, d in indeg.items() if d == 0)
    done = 0
    while queue:
        v = queue.pop(0)
        done += 1
        for e in sorted(graph.edges, key=lambda e: e.dst):
            if e.src != v:
                continue
            layer[e.dst] = max(layer[e.dst], layer[v] + 1)
            indeg[e.dst] -= 1
            if indeg[e.dst] == 0:
                queue.append(e.dst)
    if done != len(graph.nodes):
        raise ValidationError("graph has a cycle; run break_cycles first")
    return DepthLayering(layer_of=layer, num_layers=(max(layer.values()) + 1) if layer else 0)


def order_accuracy(predicted: OcclusionGraph,
                   truth_pairs: list[tuple[int, int]]) -> float | None:
    """Fraction of ground-truth (occluder, occludee) pairs reproduced with the
    right direction; a missing edge counts as wrong.  None when no truth."""
    if not truth_pairs:
        return None
    correct = sum(1 for a, b in truth_pairs if predicted.has_edge(a, b))
    return correct / len(truth_pairs)


def export_json(graph: OcclusionGraph, layers: DepthLayering | None = None) -> dict:
    out = graph.to_json()
    if layers is not None:
        out.update(layers.to_json())
    return out
