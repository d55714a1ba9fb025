"""Multi-class network model: class replication, shortest paths, flow checks.

The physical network is conceptually replicated once per vehicle class; the
copies share no links, so every per-copy computation runs on the physical
topology with per-class inputs.  Conversions between (physical entity, class)
pairs and flat "conceptual" indices are provided for assembling the
estimation problem, where the replicated network appears explicitly.

Conventions: node ids are 1-based (as in the input files), link and class
indices are 0-based.  Arrays indexed by node use position ``node - 1``.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tntp import DemandTable, NetworkSpec


@dataclass(frozen=True)
class ClassConfig:
    """Per-class parameters: congestion weight, time scale, demand share."""

    theta: tuple[float, ...]
    t0_multiplier: tuple[float, ...]
    demand_share: tuple[float, ...]

    def __post_init__(self):
        n = len(self.theta)
        if n < 1:
            raise ValueError("need at least one class")
        if len(self.t0_multiplier) != n or len(self.demand_share) != n:
            raise ValueError("per-class tuples must have equal length")
        for name, vals in (
            ("theta", self.theta),
            ("t0_multiplier", self.t0_multiplier),
            ("demand_share", self.demand_share),
        ):
            arr = np.asarray(vals, dtype=float)
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValueError(f"{name} entries must be finite and >= 0")
        if abs(sum(self.demand_share) - 1.0) > 1e-12:
            raise ValueError("demand shares must sum to 1")

    @property
    def class_count(self) -> int:
        return len(self.theta)

    @staticmethod
    def single() -> "ClassConfig":
        return ClassConfig((1.0,), (1.0,), (1.0,))

    @staticmethod
    def cars_and_trucks() -> "ClassConfig":
        """Two classes: cars (weight 1) and slower, heavier trucks."""
        return ClassConfig((1.0, 2.0), (1.0, 1.1), (0.8, 0.2))


@dataclass(frozen=True)
class FlowState:
    """Per-class link flows, shape (link_count, class_count)."""

    x: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2:
            raise ValueError(f"flow array must be 2-D, got shape {x.shape}")
        if x.size and (not np.all(np.isfinite(x)) or x.min() < 0):
            raise ValueError("flows must be finite and >= 0")
        object.__setattr__(self, "x", x)

    @property
    def n_links(self) -> int:
        return self.x.shape[0]

    @property
    def n_classes(self) -> int:
        return self.x.shape[1]

    def total_by_link(self) -> np.ndarray:
        return self.x.sum(axis=1)


@dataclass(frozen=True)
class MulticlassNetwork:
    """Physical network plus class setup and precomputed index arrays."""

    physical: NetworkSpec
    classes: ClassConfig
    # 0-based endpoint arrays, file link order
    tail: np.ndarray = field(repr=False)
    head: np.ndarray = field(repr=False)
    capacity: np.ndarray = field(repr=False)
    t0: np.ndarray = field(repr=False)
    # per-class free-flow times, shape (n_links, n_classes)
    t0_class: np.ndarray = field(repr=False)
    # CSR-style adjacency: out_links[out_start[v]:out_start[v+1]] leave node v+1
    out_start: np.ndarray = field(repr=False)
    out_links: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.physical.node_count

    @property
    def n_links(self) -> int:
        return self.physical.link_count

    @property
    def n_classes(self) -> int:
        return self.classes.class_count

    @property
    def n_conceptual_nodes(self) -> int:
        return self.n_nodes * self.n_classes

    @property
    def n_conceptual_links(self) -> int:
        return self.n_links * self.n_classes

    def conceptual_node(self, node: int, u: int) -> int:
        """Flat index of (1-based physical node, class u) in the replica."""
        if not 1 <= node <= self.n_nodes:
            raise ValueError(f"node {node} out of range")
        if not 0 <= u < self.n_classes:
            raise ValueError(f"class {u} out of range")
        return u * self.n_nodes + (node - 1)

    def conceptual_link(self, link: int, u: int) -> int:
        """Flat index of (0-based physical link, class u) in the replica."""
        if not 0 <= link < self.n_links:
            raise ValueError(f"link {link} out of range")
        if not 0 <= u < self.n_classes:
            raise ValueError(f"class {u} out of range")
        return u * self.n_links + link


def build_multiclass(spec: NetworkSpec, classes: ClassConfig) -> MulticlassNetwork:
    """Precompute endpoint/adjacency arrays for a class-replicated network."""
    n_links = spec.link_count
    tail = np.fromiter((l.from_node - 1 for l in spec.links), dtype=np.int64, count=n_links)
    head = np.fromiter((l.to_node - 1 for l in spec.links), dtype=np.int64, count=n_links)
    capacity = np.fromiter((l.capacity_m for l in spec.links), dtype=float, count=n_links)
    t0 = np.fromiter((l.free_flow_time_t0 for l in spec.links), dtype=float, count=n_links)
    mult = np.asarray(classes.t0_multiplier, dtype=float)
    t0_class = t0[:, None] * mult[None, :]

    # stable sort keeps file order among links sharing a tail
    order = np.argsort(tail, kind="stable")
    out_start = np.zeros(spec.node_count + 1, dtype=np.int64)
    np.add.at(out_start, tail + 1, 1)
    np.cumsum(out_start, out=out_start)
    return MulticlassNetwork(
        physical=spec,
        classes=classes,
        tail=tail,
        head=head,
        capacity=capacity,
        t0=t0,
        t0_class=t0_class,
        out_start=out_start,
        out_links=order,
    )


@dataclass(frozen=True)
class DemandSet:
    """Per-class OD demands; keys are 1-based (origin, destination) pairs."""

    by_class: tuple[dict[tuple[int, int], float], ...]

    def __post_init__(self):
        for table in self.by_class:
            for (o, d), v in table.items():
                if v < 0:
                    raise ValueError(f"negative demand {v} for OD ({o}, {d})")

    @property
    def n_classes(self) -> int:
        return len(self.by_class)

    def total(self) -> float:
        return float(sum(sum(t.values()) for t in self.by_class))

    def positive_origins(self, u: int) -> list[int]:
        out = {o for (o, _), v in self.by_class[u].items() if v > 0}
        return sorted(out)


def split_demand(total: DemandTable, classes: ClassConfig) -> DemandSet:
    """Split every OD demand across classes by the configured shares.

    Listed zero demands are kept so each class sees the same OD pairs as the
    input table (minus self-pairs, which the parser already removed).
    """
    by_class = tuple(
        {od: v * share for od, v in total.entries.items()}
        for share in classes.demand_share
    )
    return DemandSet(by_class)


@dataclass(frozen=True)
class ShortestPathTree:
    """Dijkstra output for one origin; arrays are indexed by ``node - 1``.

    ``pred_node[v]`` is the 1-based predecessor of node v+1 (-1 for the
    origin and unreachable nodes); ``pred_link[v]`` the 0-based index of the
    entering tree link (-1 likewise); ``dist[v]`` is +inf when unreachable.
    """

    origin: int
    dist: np.ndarray
    pred_node: np.ndarray
    pred_link: np.ndarray

    def reachable(self, node: int) -> bool:
        return bool(np.isfinite(self.dist[node - 1]))

    def path_links(self, dest: int) -> list[int]:
        """Link indices from the origin to ``dest`` in traversal order."""
        if not self.reachable(dest):
            raise ValueError(f"node {dest} unreachable from {self.origin}")
        links: list[int] = []
        v = dest
        while v != self.origin:
            links.append(int(self.pred_link[v - 1]))
            v = int(self.pred_node[v - 1])
        links.reverse()
        return links


def shortest_path_tree(
    net: MulticlassNetwork, origin: int, link_costs: np.ndarray
) -> ShortestPathTree:
    """One-to-all Dijkstra over the physical topology.

    ``link_costs`` has one nonnegative entry per physical link.  Ties are
    broken deterministically: among equal-cost label updates the smaller
    predecessor node wins, then the smaller link index.
    """
    costs = np.asarray(link_costs, dtype=float)
    if costs.shape != (net.n_links,):
        raise ValueError(
            f"expected {net.n_links} link costs, got shape {costs.shape}"
        )
    if costs.size and (not np.all(np.isfinite(costs)) or costs.min() < 0):
        raise ValueError("link costs must be finite and >= 0")
    if not 1 <= origin <= net.n_nodes:
        raise ValueError(f"origin {origin} out of range [1, {net.n_nodes}]")

    n = net.n_nodes
    dist = np.full(n, np.inf)
    pred_node = np.full(n, -1, dtype=np.int64)
    pred_link = np.full(n, -1, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    root = origin - 1
    dist[root] = 0.0
    heap: list[tuple[float, int]] = [(0.0, root)]
    out_start, out_links = net.out_start, net.out_links
    head = net.head
    while heap:
        d, v = heapq.heappop(heap)
        if done[v]:
            continue
        done[v] = True
        for a in out_links[out_start[v] : out_start[v + 1]]:
            w = head[a]
            if done[w]:
                continue
            nd = d + costs[a]
            old = dist[w]
            if nd < old:
                better = True
            elif nd == old:
                # deterministic tie rule: smaller pred node, then smaller link
                better = (v + 1, a) < (pred_node[w], pred_link[w])
            else:
                better = False
            if better:
                dist[w] = nd
                pred_node[w] = v + 1
                pred_link[w] = a
                if nd < old:
                    heapq.heappush(heap, (nd, int(w)))
    return ShortestPathTree(origin, dist, pred_node, pred_link)


def node_balance(net: MulticlassNetwork, link_flow: np.ndarray) -> np.ndarray:
    """Inflow minus outflow at every node for one per-link flow vector."""
    balance = np.zeros(net.n_nodes)
    np.add.at(balance, net.head, link_flow)
    np.subtract.at(balance, net.tail, link_flow)
    return balance


def feasibility_residual(
    net: MulticlassNetwork,
    origin_flows: Mapping[tuple[int, int], np.ndarray],
    demands: DemandSet,
    aggregate: FlowState | None = None,
) -> float:
    """Max-norm violation of per-origin flow conservation.

    ``origin_flows`` maps (class index, 1-based origin) to a per-link flow
    vector.  For every class/origin with positive demand the node balance
    must equal the demand pattern (demand enters at each destination, the
    total leaves the origin); missing keys count as all-zero flows.  When
    ``aggregate`` is given, its per-class columns must match the summed
    per-origin flows and any discrepancy enters the residual.
    """
    if demands.n_classes != net.n_classes:
        raise ValueError("demand class count does not match network")
    residual = 0.0
    sums = np.zeros((net.n_links, net.n_classes))
    for (u, o), flow in origin_flows.items():
        flow = np.asarray(flow, dtype=float)
        if flow.shape != (net.n_links,):
            raise ValueError(
                f"flow vector for class {u} origin {o} has shape {flow.shape}"
            )
        if flow.size:
            residual = max(residual, float(-min(flow.min(), 0.0)))
        sums[:, u] += flow
        rhs = np.zeros(net.n_nodes)
        total = 0.0
        for (oo, d), v in demands.by_class[u].items():
            if oo == o and v > 0:
                rhs[d - 1] += v
                total += v
        rhs[o - 1] -= total
        gap = node_balance(net, flow) - rhs
        residual = max(residual, float(np.abs(gap).max(initial=0.0)))
    for u in range(net.n_classes):
        for o in demands.positive_origins(u):
            if (u, o) not in origin_flows:
                # absent flows leave the whole demand of (u, o) unserved
                total = sum(
                    v for (oo, _), v in demands.by_class[u].items() if oo == o
                )
                residual = max(residual, float(total))
    if aggregate is not None:
        if aggregate.x.shape != sums.shape:
            raise ValueError("aggregate flow shape mismatch")
        residual = max(residual, float(np.abs(aggregate.x - sums).max(initial=0.0)))
    return residual
