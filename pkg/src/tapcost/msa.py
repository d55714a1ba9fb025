"""Equilibrium assignment by the method of successive averages.

Starting from zero flow, each iteration loads all demand onto current
shortest paths (all-or-nothing) and moves a 1/iteration step toward that
target.  The averaging happens per class and per origin, so a per-origin
route-flow decomposition is available alongside the aggregate link flows.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cost import CostModel, congestion_ratios, eval_latency
from .network import (
    DemandSet,
    FlowState,
    MulticlassNetwork,
    feasibility_residual,
    shortest_path_tree,
)


class UnreachableDemandError(ValueError):
    """Positive demand toward a node the origin cannot reach."""


@dataclass(frozen=True)
class MsaConfig:
    """Stopping rule: relative-gap threshold and iteration cap."""

    epsilon_rg: float = 1e-6
    max_iters: int = 1000

    def __post_init__(self):
        if self.epsilon_rg <= 0:
            raise ValueError("epsilon_rg must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class MsaStats:
    """Run diagnostics; ``rg_trace[k]`` is the relative gap at iteration k+1."""

    iterations: int
    rg_trace: list[float]
    total_cost: float
    vi_epsilon: float
    feasibility: float
    origin_flows: dict[tuple[int, int], np.ndarray] | None = field(
        default=None, repr=False
    )

    @property
    def final_rg(self) -> float:
        return self.rg_trace[-1] if self.rg_trace else 0.0


def _demands_by_origin(
    demands: DemandSet,
) -> list[list[tuple[int, list[tuple[int, float]]]]]:
    """Group positive demands as per-class sorted (origin, [(dest, value)])."""
    grouped: list[list[tuple[int, list[tuple[int, float]]]]] = []
    for table in demands.by_class:
        by_origin: dict[int, list[tuple[int, float]]] = {}
        for (o, d), v in table.items():
            if v > 0:
                by_origin.setdefault(o, []).append((d, v))
        grouped.append([(o, sorted(by_origin[o])) for o in sorted(by_origin)])
    return grouped


def _load_origin(
    net: MulticlassNetwork,
    origin: int,
    dests: list[tuple[int, float]],
    costs: np.ndarray,
) -> np.ndarray:
    """All-or-nothing link loads for one origin, walking predecessor chains."""
    tree = shortest_path_tree(net, origin, costs)
    flow = np.zeros(net.n_links)
    for dest, value in dests:
        if not tree.reachable(dest):
            raise UnreachableDemandError(
                f"demand {value} from {origin} to unreachable node {dest}"
            )
        v = dest
        while v != origin:
            flow[tree.pred_link[v - 1]] += value
            v = int(tree.pred_node[v - 1])
    return flow


def all_or_nothing(
    net: MulticlassNetwork, demands: DemandSet, link_costs: np.ndarray
) -> FlowState:
    """Load every OD demand onto its current shortest path.

    ``link_costs`` has shape (n_links, n_classes); each class is routed on
    its own cost column over the shared physical topology.
    """
    costs = np.asarray(link_costs, dtype=float)
    if costs.shape != (net.n_links, net.n_classes):
        raise ValueError(
            f"expected cost shape ({net.n_links}, {net.n_classes}), "
            f"got {costs.shape}"
        )
    x = np.zeros((net.n_links, net.n_classes))
    for u, origins in enumerate(_demands_by_origin(demands)):
        for origin, dests in origins:
            x[:, u] += _load_origin(net, origin, dests, costs[:, u])
    return FlowState(x)


def msa_solve(
    net: MulticlassNetwork,
    demands: DemandSet,
    model: CostModel,
    cfg: MsaConfig = MsaConfig(),
    keep_origin_flows: bool = True,
) -> tuple[FlowState, MsaStats]:
    """Run successive averages until the relative gap falls below threshold.

    The relative gap is ||x_l - x_{l-1}||_2 / ||x_l||_2 over the full flow
    array, with 0/0 read as 0 (so an all-zero demand terminates after one
    iteration).  Raises :class:`UnreachableDemandError` when any positive
    demand cannot be routed.
    """
    if demands.n_classes != net.n_classes:
        raise ValueError("demand class count does not match network")
    grouped = _demands_by_origin(demands)
    shape = (net.n_links, net.n_classes)

    per_origin: dict[tuple[int, int], np.ndarray] = {
        (u, o): np.zeros(net.n_links)
        for u, origins in enumerate(grouped)
        for o, _ in origins
    }
    x = np.zeros(shape)
    rg_trace: list[float] = []
    for it in range(1, cfg.max_iters + 1):
        costs = eval_latency(FlowState(x), model)
        step = 1.0 / it
        new_x = np.zeros(shape)
        for u, origins in enumerate(grouped):
            for origin, dests in origins:
                target = _load_origin(net, origin, dests, costs[:, u])
                cur = per_origin[(u, origin)]
                cur += step * (target - cur)
                new_x[:, u] += cur
        rg_den = float(np.linalg.norm(new_x))
        rg_num = float(np.linalg.norm(new_x - x))
        rg = rg_num / rg_den if rg_den > 0 else 0.0
        rg_trace.append(rg)
        x = new_x
        if rg < cfg.epsilon_rg:
            break

    flows = FlowState(x)
    feas = feasibility_residual(net, per_origin, demands, aggregate=flows)
    final_costs = eval_latency(flows, model)
    total_cost = float(np.sum(final_costs * x))
    gap = total_cost - _best_response_cost(net, grouped, final_costs)
    stats = MsaStats(
        iterations=len(rg_trace),
        rg_trace=rg_trace,
        total_cost=total_cost,
        vi_epsilon=max(gap, 0.0),
        feasibility=feas,
        origin_flows=per_origin if keep_origin_flows else None,
    )
    return flows, stats


def _best_response_cost(
    net: MulticlassNetwork,
    grouped: list[list[tuple[int, list[tuple[int, float]]]]],
    costs: np.ndarray,
) -> float:
    """Cheapest feasible total cost when link costs are frozen."""
    best = 0.0
    for u, origins in enumerate(grouped):
        for origin, dests in origins:
            tree = shortest_path_tree(net, origin, costs[:, u])
            for dest, value in dests:
                if not tree.reachable(dest):
                    raise UnreachableDemandError(
                        f"demand {value} from {origin} to unreachable node {dest}"
                    )
                best += value * float(tree.dist[dest - 1])
    return best


def vi_epsilon(
    flows: FlowState,
    net: MulticlassNetwork,
    demands: DemandSet,
    model: CostModel,
    feas_tol: float = 1e-6,
) -> float:
    """Equilibrium quality of a feasible flow: t(x)'x minus min_y t(x)'y.

    Zero would certify an exact equilibrium.  The flow must satisfy
    per-class aggregate node balance up to ``feas_tol`` (scaled by the
    largest demand) or a ValueError is raised; the returned gap is clamped
    at zero so rounding noise cannot make it negative.
    """
    if flows.x.shape != (net.n_links, net.n_classes):
        raise ValueError("flow shape does not match network")
    if demands.n_classes != net.n_classes:
        raise ValueError("demand class count does not match network")
    max_demand = max(
        (v for t in demands.by_class for v in t.values()), default=0.0
    )
    scale = max(1.0, max_demand)
    for u in range(net.n_classes):
        rhs = np.zeros(net.n_nodes)
        for (o, d), v in demands.by_class[u].items():
            if v > 0:
                rhs[d - 1] += v
                rhs[o - 1] -= v
        balance = np.zeros(net.n_nodes)
        np.add.at(balance, net.head, flows.x[:, u])
        np.subtract.at(balance, net.tail, flows.x[:, u])
        gap = float(np.abs(balance - rhs).max(initial=0.0))
        if gap > feas_tol * scale:
            raise ValueError(
                f"class {u} node balance violated by {gap:.3e} "
                f"(tolerance {feas_tol * scale:.3e})"
            )
    costs = eval_latency(flows, model)
    total = float(np.sum(costs * flows.x))
    best = _best_response_cost(net, _demands_by_origin(demands), costs)
    return max(total - best, 0.0)


def relative_vi_epsilon(
    flows: FlowState,
    net: MulticlassNetwork,
    demands: DemandSet,
    model: CostModel,
) -> float:
    """VI gap normalized by the total cost at the given flow."""
    eps = vi_epsilon(flows, net, demands, model)
    total = float(np.sum(eval_latency(flows, model) * flows.x))
    return eps / total if total > 0 else 0.0
