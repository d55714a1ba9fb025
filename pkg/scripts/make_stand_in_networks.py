#!/usr/bin/env python3
"""Generate the two larger benchmark data sets as deterministic stand-ins.

The published instances for the district-scale (361 nodes / 26 zones / 766
links) and city-scale (416 nodes / 38 zones / 914 links) benchmarks are not
redistributable with this repository, so this script synthesizes networks
with exactly those dimensions: a street grid where most streets are one-way
(alternating direction by row/column, as in a dense city core) and the
remainder are two-way arterials, zones spread on a jittered lattice,
gravity-model demands, and a global demand scale calibrated so equilibrium
congestion ratios cover a realistic range under each network's ground-truth
latency function.  One-way streets are what make the link budget work at
these dimensions: a bidirected-only graph on this many nodes would be nearly
a tree, with no alternative routes and no congestion spreading.  Everything
is seeded; reruns reproduce the committed files byte-for-byte.

Run from anywhere:  python3 scripts/make_stand_in_networks.py
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from tapcost import (  # noqa: E402
    ClassConfig,
    CostModel,
    DemandTable,
    EstimationConfig,
    GROUND_TRUTHS,
    LinkSpec,
    MsaConfig,
    NetworkSpec,
    Observation,
    build_multiclass,
    congestion_ratios,
    estimate,
    msa_solve,
    parse_network,
    parse_trips,
    split_demand,
    write_network,
    write_trips,
)

DATA_DIR = Path(__file__).resolve().parents[1] / "data"


def _grid_streets(rows: int, cols: int) -> list[tuple[int, int, str]]:
    """(a, b, orientation) for every grid adjacency, 0-based node ids."""
    out = []
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c
            if c + 1 < cols:
                out.append((v, v + 1, "h"))
            if r + 1 < rows:
                out.append((v, v + cols, "v"))
    return out


def _oneway_direction(a: int, b: int, orientation: str, cols: int) -> tuple[int, int]:
    """Alternate direction by row (horizontal) or column (vertical) parity."""
    r, c = divmod(a, cols)
    if orientation == "h":
        return (a, b) if r % 2 == 0 else (b, a)
    return (a, b) if c % 2 == 1 else (b, a)


def _strongly_connected(n: int, arcs: list[tuple[int, int]]) -> bool:
    """Reachability from node 0 in the graph and its reverse covers all nodes."""
    fwd: list[list[int]] = [[] for _ in range(n)]
    bwd: list[list[int]] = [[] for _ in range(n)]
    for a, b in arcs:
        fwd[a].append(b)
        bwd[b].append(a)

    def _full_reach(adj: list[list[int]]) -> bool:
        seen = np.zeros(n, dtype=bool)
        seen[0] = True
        stack = [0]
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if not seen[w]:
                    seen[w] = True
                    stack.append(w)
        return bool(seen.all())

    return _full_reach(fwd) and _full_reach(bwd)


def build_network(
    rows: int,
    cols: int,
    n_zones: int,
    n_links: int,
    seed: int,
) -> tuple[NetworkSpec, np.ndarray]:
    """Street-grid network with exact node/zone/link counts.

    Every grid adjacency is a street; n_links - #streets of them are made
    two-way (one directed link each way), the rest one-way.  Returns the
    spec plus the (n_nodes, 2) grid coordinates in the final node numbering
    (zones first, as the trip format requires).
    """
    rng = np.random.default_rng(seed)
    n_nodes = rows * cols
    streets = _grid_streets(rows, cols)
    n_two_way = n_links - len(streets)
    if n_two_way < 0 or n_two_way > len(streets):
        raise ValueError(
            f"link budget {n_links} incompatible with {len(streets)} streets"
        )

    for _ in range(200):
        two_way = set(
            rng.choice(len(streets), size=n_two_way, replace=False).tolist()
        )
        arcs = []
        for idx, (a, b, orientation) in enumerate(streets):
            if idx in two_way:
                arcs.append((a, b))
                arcs.append((b, a))
            else:
                arcs.append(_oneway_direction(a, b, orientation, cols))
        if _strongly_connected(n_nodes, arcs):
            break
    else:
        raise RuntimeError("no strongly connected two-way assignment found")

    # zones on a jittered lattice so demand spreads over the whole grid
    k = int(np.ceil(np.sqrt(n_zones)))
    lattice = [
        ((i + 0.5) * rows / k, (j + 0.5) * cols / k)
        for i in range(k)
        for j in range(k)
    ]
    rng.shuffle(lattice)
    taken: set[int] = set()
    zone_nodes = []
    for r, c in lattice[:n_zones]:
        rr = int(np.clip(round(r + rng.normal(0.0, 0.7)), 0, rows - 1))
        cc = int(np.clip(round(c + rng.normal(0.0, 0.7)), 0, cols - 1))
        v = rr * cols + cc
        while v in taken:
            v = (v + 1) % n_nodes
        taken.add(v)
        zone_nodes.append(v)
    zones_old = np.sort(np.array(zone_nodes))

    renum = np.empty(n_nodes, dtype=int)  # old 0-based -> new 1-based
    renum[zones_old] = np.arange(1, n_zones + 1)
    rest = np.setdiff1d(np.arange(n_nodes), zones_old)
    renum[rest] = np.arange(n_zones + 1, n_nodes + 1)

    coords = np.empty((n_nodes, 2))
    for v in range(n_nodes):
        coords[renum[v] - 1] = (v // cols, v % cols)

    links: list[LinkSpec] = []
    for idx, (a, b, orientation) in enumerate(streets):
        # two-way streets are usually arterials; directions jittered separately
        arterial = rng.random() < (0.8 if idx in two_way else 0.35)
        base_cap = rng.uniform(2200.0, 3600.0) if arterial else rng.uniform(
            1000.0, 1800.0
        )
        base_t = rng.uniform(1.3, 2.0) if arterial else rng.uniform(2.2, 3.6)
        if idx in two_way:
            dirs = [(a, b), (b, a)]
        else:
            dirs = [_oneway_direction(a, b, orientation, cols)]
        for u, v in dirs:
            cap = round(float(base_cap * rng.uniform(0.95, 1.05)), 1)
            t0 = round(float(base_t * rng.uniform(0.97, 1.03)), 2)
            links.append(LinkSpec(renum[u], renum[v], cap, t0))
    links.sort(key=lambda lk: (lk.from_node, lk.to_node))
    return NetworkSpec(n_nodes, n_zones, tuple(links)), coords


def build_demand(
    n_zones: int, coords: np.ndarray, seed: int, scale: float
) -> DemandTable:
    """Gravity-model OD table over the zone nodes, scaled globally."""
    rng = np.random.default_rng(seed)
    weight = rng.lognormal(0.0, 0.25, n_zones)
    zone_xy = coords[:n_zones]
    span = max(coords[:, 0].max(), coords[:, 1].max())
    entries: dict[tuple[int, int], float] = {}
    for o in range(n_zones):
        for d in range(n_zones):
            if o == d:
                continue
            dist = float(np.hypot(*(zone_xy[o] - zone_xy[d])))
            base = weight[o] * weight[d] * np.exp(-dist / (1.5 * span))
            entries[(o + 1, d + 1)] = round(float(scale * base), 2)
    return DemandTable(n_zones, entries)


def calibrate_scale(
    spec: NetworkSpec,
    coords: np.ndarray,
    demand_seed: int,
    truth_name: str,
    target_zmax: float,
) -> float:
    """Pick the demand scale whose 300-iteration equilibrium hits target_zmax."""
    classes = ClassConfig.cars_and_trucks()
    net = build_multiclass(spec, classes)
    model = CostModel(net, GROUND_TRUTHS[truth_name])

    def zmax_at(scale: float) -> float:
        table = build_demand(spec.zone_count, coords, demand_seed, scale)
        demands = split_demand(table, classes)
        flows, _ = msa_solve(
            net, demands, model, MsaConfig(1e-5, 300), keep_origin_flows=False
        )
        return float(congestion_ratios(flows, net).max())

    lo, hi = 10.0, 5000.0
    zlo, zhi = zmax_at(lo), zmax_at(hi)
    if not (zlo < target_zmax < zhi):
        raise RuntimeError(f"target z_max outside bracket: {zlo}..{zhi}")
    for _ in range(12):
        mid = np.sqrt(lo * hi)  # demand acts multiplicatively on ratios
        zm = zmax_at(mid)
        if zm < target_zmax:
            lo = mid
        else:
            hi = mid
    return round(float(np.sqrt(lo * hi)), 3)


def verify(name: str, truth_name: str) -> None:
    """Full-pipeline check on the freshly written files."""
    spec = parse_network((DATA_DIR / f"{name}_net.tntp").read_text())
    table = parse_trips((DATA_DIR / f"{name}_trips.tntp").read_text())
    classes = ClassConfig.cars_and_trucks()
    net = build_multiclass(spec, classes)
    demands = split_demand(table, classes)
    truth = GROUND_TRUTHS[truth_name]
    model = CostModel(net, truth)
    t0 = time.time()
    flows, stats = msa_solve(
        net, demands, model, MsaConfig(1e-6, 1000), keep_origin_flows=False
    )
    t_msa = time.time() - t0
    z = congestion_ratios(flows, net)
    obs = Observation(net, demands, flows)
    t0 = time.time()
    result = estimate(
        [obs], EstimationConfig(5, 1.5, 0.01), tol_primal=1e-4, tol_dual=1e-4
    )
    t_est = time.time() - t0
    grid = np.linspace(0.0, 0.9 * float(z.max()), 101)
    err = float(np.max(np.abs(result.poly(grid) - truth(grid)) / truth(grid)))
    print(
        f"{name}: links={spec.link_count} zones={spec.zone_count} "
        f"total_demand={table.total():.1f}"
    )
    print(
        f"  msa {t_msa:.1f}s rg={stats.final_rg:.2e} "
        f"z in [{z.min():.3f}, {z.max():.3f}] median={np.median(z):.3f}"
    )
    print(
        f"  estimate {t_est:.1f}s status={result.qp.status} sup_rel_err={err:.4f} "
        f"beta={np.round(result.poly.beta, 4)}"
    )


NETWORKS = {
    # name: (rows, cols, zones, links, net seed, demand seed, truth, z_max)
    "berlin_tiergarten": (19, 19, 26, 766, 20260815, 101, "quartic1", 2.5),
    "anaheim": (16, 26, 38, 914, 20260816, 202, "bpr015", 2.8),
}


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--skip-verify", action="store_true", help="write files only"
    )
    args = parser.parse_args()
    for name, (rows, cols, nz, nl, seed, dseed, truth, zmax) in NETWORKS.items():
        spec, coords = build_network(rows, cols, nz, nl, seed)
        scale = calibrate_scale(spec, coords, dseed, truth, zmax)
        table = build_demand(nz, coords, dseed, scale)
        with open(DATA_DIR / f"{name}_net.tntp", "w") as fh:
            write_network(spec, fh)
        with open(DATA_DIR / f"{name}_trips.tntp", "w") as fh:
            write_trips(table, fh)
        print(f"{name}: wrote net+trips (demand scale {scale})", flush=True)
        if not args.skip_verify:
            verify(name, truth)


if __name__ == "__main__":
    main()
