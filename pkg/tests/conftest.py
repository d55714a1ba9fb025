"""Shared fixtures: vendored benchmark data, small synthetic networks, and a
brute-force reference solver for small quadratic programs."""
from __future__ import annotations

import itertools
from pathlib import Path

import numpy as np
import pytest

from tapcost import (
    ClassConfig,
    CostModel,
    DemandTable,
    GROUND_TRUTHS,
    LinkSpec,
    MsaConfig,
    NetworkSpec,
    QpProblem,
    build_multiclass,
    msa_solve,
    parse_network,
    parse_trips,
    split_demand,
)

DATA_DIR = Path(__file__).resolve().parent.parent / "data"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture(scope="session")
def sioux_spec() -> NetworkSpec:
    return parse_network((DATA_DIR / "sioux_falls_net.tntp").read_text())


@pytest.fixture(scope="session")
def sioux_table() -> DemandTable:
    return parse_trips((DATA_DIR / "sioux_falls_trips.tntp").read_text())


@pytest.fixture(scope="session")
def sioux_equilibrium(sioux_spec, sioux_table):
    """Sioux-Falls benchmark equilibrium under the quartic 15% ground truth.

    Expensive (a full 1000-iteration run), so shared across the whole
    session; treat every field as read-only.
    """
    classes = ClassConfig.cars_and_trucks()
    net = build_multiclass(sioux_spec, classes)
    demands = split_demand(sioux_table, classes)
    model = CostModel(net, GROUND_TRUTHS["bpr015"])
    flows, stats = msa_solve(
        net, demands, model, MsaConfig(epsilon_rg=1e-6, max_iters=1000)
    )
    return {
        "net": net,
        "demands": demands,
        "model": model,
        "flows": flows,
        "stats": stats,
    }


def make_net(node_count: int, links: list[tuple], zone_count: int | None = None):
    """NetworkSpec from (from, to, capacity, t0) tuples."""
    return NetworkSpec(
        node_count,
        zone_count if zone_count is not None else node_count,
        tuple(LinkSpec(*lk) for lk in links),
    )


def single_link_net() -> NetworkSpec:
    return make_net(2, [(1, 2, 100.0, 5.0)])


def parallel_net(m=(100.0, 100.0), t0=(5.0, 5.0)) -> NetworkSpec:
    """Two nodes joined by two parallel links (the bisection-oracle shape)."""
    return make_net(2, [(1, 2, m[0], t0[0]), (1, 2, m[1], t0[1])])


def diamond_net(costs=(1.0, 1.0, 1.0, 2.0)) -> NetworkSpec:
    """1->2->4 and 1->3->4 with free-flow times taken from ``costs``."""
    return make_net(
        4,
        [
            (1, 2, 100.0, costs[0]),
            (2, 4, 100.0, costs[1]),
            (1, 3, 100.0, costs[2]),
            (3, 4, 100.0, costs[3]),
        ],
    )


def random_qp(rng: np.random.Generator) -> QpProblem:
    """Small strictly convex QP with a guaranteed-feasible random point.

    Bounds are placed around A @ z0 for a random z0, so the feasible set is
    nonempty; offsets are small enough that constraints bind often.
    """
    n = int(rng.integers(1, 9))
    m = int(rng.integers(1, 7))
    mat = rng.normal(size=(n, n))
    p_mat = mat @ mat.T + (0.5 + rng.uniform()) * np.eye(n)
    q = 2.0 * rng.normal(size=n)
    a_mat = rng.normal(size=(m, n))
    z0 = rng.normal(size=n)
    base = a_mat @ z0
    lo = np.full(m, -np.inf)
    hi = np.full(m, np.inf)
    for i in range(m):
        kind = rng.choice(["both", "upper", "lower", "equality"],
                          p=[0.4, 0.25, 0.25, 0.1])
        if kind == "equality":
            lo[i] = hi[i] = base[i]
        else:
            if kind in ("both", "lower"):
                lo[i] = base[i] - rng.uniform(0.1, 1.5)
            if kind in ("both", "upper"):
                hi[i] = base[i] + rng.uniform(0.1, 1.5)
    return QpProblem(p_mat, q, a_mat, lo, hi)


def enumerate_qp_solution(problem: QpProblem, feas_tol: float = 1e-8):
    """Reference solve by enumerating every active-set assignment.

    Each row is free, pinned at its lower bound, or pinned at its upper
    bound; each assignment yields an equality-constrained system whose
    solution is screened for feasibility and multiplier signs.  Requires
    strictly convex P (any KKT point is then the global optimum).  Returns
    (z, duals, objective).
    """
    p_dense = problem.P.toarray()
    a_dense = problem.A.toarray()
    n, m = problem.n_vars, problem.n_cons
    states_per_row = []
    for i in range(m):
        if problem.l[i] == problem.u[i]:
            states_per_row.append(("eq",))
        else:
            states = ["free"]
            if np.isfinite(problem.l[i]):
                states.append("lo")
            if np.isfinite(problem.u[i]):
                states.append("up")
            states_per_row.append(tuple(states))

    best = None
    for assignment in itertools.product(*states_per_row):
        active = [i for i, s in enumerate(assignment) if s != "free"]
        k = len(active)
        kkt = np.zeros((n + k, n + k))
        kkt[:n, :n] = p_dense
        rhs = np.concatenate([-problem.q, np.zeros(k)])
        for j, i in enumerate(active):
            kkt[:n, n + j] = a_dense[i]
            kkt[n + j, :n] = a_dense[i]
            rhs[n + j] = problem.l[i] if assignment[i] in ("lo", "eq") else problem.u[i]
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            continue
        if np.max(np.abs(kkt @ sol - rhs)) > 1e-7:
            continue  # near-singular system, solution untrustworthy
        z, y_act = sol[:n], sol[n:]
        az = a_dense @ z
        ok = True
        for i, s in enumerate(assignment):
            if s == "free":
                if az[i] < problem.l[i] - feas_tol or az[i] > problem.u[i] + feas_tol:
                    ok = False
                    break
        if ok:
            for j, i in enumerate(active):
                if assignment[i] == "lo" and y_act[j] > feas_tol:
                    ok = False
                    break
                if assignment[i] == "up" and y_act[j] < -feas_tol:
                    ok = False
                    break
        if not ok:
            continue
        duals = np.zeros(m)
        duals[active] = y_act
        obj = float(0.5 * z @ (p_dense @ z) + problem.q @ z)
        if best is None or obj < best[2]:
            best = (z, duals, obj)
    assert best is not None, "no valid active set found"
    return best
