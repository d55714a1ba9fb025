"""Successive-averages solver: update rule, convergence, VI diagnostics."""
from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import brentq

from tapcost import (
    ClassConfig,
    CostModel,
    DemandTable,
    FlowState,
    GROUND_TRUTHS,
    MsaConfig,
    PolynomialCost,
    UnreachableDemandError,
    all_or_nothing,
    build_multiclass,
    eval_latency,
    msa_solve,
    relative_vi_epsilon,
    split_demand,
    vi_epsilon,
)
from tapcost.msa import MsaStats

from conftest import diamond_net, make_net, parallel_net, single_link_net


def _single_class_problem(spec, od_demands):
    classes = ClassConfig.single()
    net = build_multiclass(spec, classes)
    demands = split_demand(DemandTable(spec.zone_count, od_demands), classes)
    return net, demands


# --- config validation ---------------------------------------------------------

def test_msa_config_validation():
    with pytest.raises(ValueError, match="epsilon_rg"):
        MsaConfig(epsilon_rg=0.0)
    with pytest.raises(ValueError, match="max_iters"):
        MsaConfig(max_iters=0)


def test_stats_final_rg_empty_trace():
    stats = MsaStats(0, [], 0.0, 0.0, 0.0)
    assert stats.final_rg == 0.0


# --- all_or_nothing -------------------------------------------------------------

def test_aon_single_od():
    net, demands = _single_class_problem(single_link_net(), {(1, 2): 7.0})
    flows = all_or_nothing(net, demands, np.array([[5.0]]))
    assert flows.x[0, 0] == 7.0


def test_aon_diamond_picks_shorter_path():
    net, demands = _single_class_problem(diamond_net(), {(1, 4): 10.0})
    costs = np.array([[1.0], [1.0], [1.0], [2.0]])
    flows = all_or_nothing(net, demands, costs)
    assert np.allclose(flows.x[:, 0], [10.0, 10.0, 0.0, 0.0])


def test_aon_uniform_class_scaling_same_paths():
    # scaling one class's costs uniformly cannot change its shortest paths
    spec = diamond_net()
    classes = ClassConfig.cars_and_trucks()
    net = build_multiclass(spec, classes)
    demands = split_demand(DemandTable(4, {(1, 4): 100.0}), classes)
    base = np.array([3.0, 1.0, 2.0, 1.5])
    costs = np.column_stack([base, 1.1 * base])
    flows = all_or_nothing(net, demands, costs)
    used = flows.x > 0
    assert np.array_equal(used[:, 0], used[:, 1])
    assert np.allclose(flows.x.sum(axis=0)[0] / 80.0, flows.x.sum(axis=0)[1] / 20.0)


def test_aon_cost_shape_check():
    net, demands = _single_class_problem(single_link_net(), {(1, 2): 1.0})
    with pytest.raises(ValueError, match="cost shape"):
        all_or_nothing(net, demands, np.zeros((1, 2)))


def test_aon_unreachable_demand():
    spec = make_net(3, [(1, 2, 1.0, 1.0)])
    net, demands = _single_class_problem(spec, {(1, 3): 1.0})
    with pytest.raises(UnreachableDemandError, match="unreachable"):
        all_or_nothing(net, demands, np.array([[1.0]]))


# --- msa_solve -------------------------------------------------------------------

def test_single_path_fixed_point():
    net, demands = _single_class_problem(single_link_net(), {(1, 2): 7.0})
    model = CostModel(net, GROUND_TRUTHS["bpr015"])
    flows, stats = msa_solve(net, demands, model, MsaConfig(1e-6, 50))
    assert flows.x[0, 0] == 7.0
    # first gap is 1 by the 0/0 convention's complement (x0 = 0), second is 0
    assert stats.rg_trace[0] == 1.0
    assert stats.rg_trace[1] == 0.0
    assert stats.iterations == 2
    assert stats.vi_epsilon == 0.0


def test_zero_demand_terminates_immediately():
    net, demands = _single_class_problem(single_link_net(), {(1, 2): 0.0})
    model = CostModel(net, GROUND_TRUTHS["bpr015"])
    flows, stats = msa_solve(net, demands, model, MsaConfig(1e-6, 50))
    assert np.all(flows.x == 0.0)
    assert stats.iterations == 1
    assert stats.final_rg == 0.0


def test_msa_unreachable_demand():
    spec = make_net(3, [(1, 2, 1.0, 1.0)])
    net, demands = _single_class_problem(spec, {(1, 3): 2.0})
    model = CostModel(net, GROUND_TRUTHS["bpr015"])
    with pytest.raises(UnreachableDemandError):
        msa_solve(net, demands, model)


def test_parallel_links_match_bisection_oracle():
    # two routes, one OD: the equilibrium equalizes latencies, and that
    # scalar equation is solvable to machine precision independently
    m1, m2 = 100.0, 150.0
    t1, t2 = 5.0, 6.0
    d = 300.0
    spec = parallel_net((m1, m2), (t1, t2))
    net, demands = _single_class_problem(spec, {(1, 2): d})
    model = CostModel(net, GROUND_TRUTHS["bpr015"])

    def latency_gap(x1: float) -> float:
        f = GROUND_TRUTHS["bpr015"]
        return t1 * f(x1 / m1) - t2 * f((d - x1) / m2)

    x1_star = brentq(latency_gap, 0.0, d, xtol=1e-12)
    flows, stats = msa_solve(net, demands, model, MsaConfig(1e-12, 1000))
    assert flows.x[0, 0] == pytest.approx(x1_star, rel=5e-3)
    assert flows.x[1, 0] == pytest.approx(d - x1_star, rel=5e-3)
    assert stats.feasibility <= 1e-9 * d


def test_update_rule_matches_manual_averaging():
    # x_l must equal the running mean of the all-or-nothing targets
    spec = diamond_net()
    classes = ClassConfig.cars_and_trucks()
    net = build_multiclass(spec, classes)
    demands = split_demand(
        DemandTable(4, {(1, 4): 400.0, (2, 4): 100.0}), classes
    )
    model = CostModel(net, GROUND_TRUTHS["bpr015"])
    L = 7
    flows, _ = msa_solve(net, demands, model, MsaConfig(1e-15, L))

    x = np.zeros((net.n_links, 2))
    targets = []
    for ell in range(1, L + 1):
        y = all_or_nothing(net, demands, eval_latency(FlowState(x), model)).x
        targets.append(y)
        x = x + (y - x) / ell
    assert np.allclose(flows.x, np.mean(targets, axis=0), rtol=1e-10, atol=1e-10)
    assert np.allclose(flows.x, x, rtol=1e-10, atol=1e-10)


def test_msa_deterministic():
    net, demands = _single_class_problem(
        diamond_net(), {(1, 4): 250.0, (1, 2): 40.0}
    )
    model = CostModel(net, GROUND_TRUTHS["bpr015"])
    f1, s1 = msa_solve(net, demands, model, MsaConfig(1e-9, 60))
    f2, s2 = msa_solve(net, demands, model, MsaConfig(1e-9, 60))
    assert np.array_equal(f1.x, f2.x)
    assert s1.rg_trace == s2.rg_trace


def test_rg_trace_scale_invariance():
    # with flow-independent costs, doubling demands doubles every iterate
    # exactly (powers of two are exact float scalings), so RG is unchanged
    spec = diamond_net()
    flat = PolynomialCost((1.0, 0.0))

    def trace(alpha: float) -> list[float]:
        net, demands = _single_class_problem(
            spec, {(1, 4): alpha * 100.0, (2, 4): alpha * 12.5}
        )
        model = CostModel(net, flat)
        _, stats = msa_solve(net, demands, model, MsaConfig(1e-9, 20))
        return stats.rg_trace

    assert trace(2.0) == trace(1.0)


def test_iterate_feasibility_along_run(sioux_equilibrium):
    stats = sioux_equilibrium["stats"]
    demands = sioux_equilibrium["demands"]
    max_demand = max(v for t in demands.by_class for v in t.values())
    assert stats.feasibility <= 1e-9 * max_demand


def test_sioux_rg_decreases_like_one_over_ell(sioux_equilibrium):
    trace = sioux_equilibrium["stats"].rg_trace
    assert len(trace) == 1000  # terminates by the cap
    # late-phase averaging forces the gap under a C/ell envelope
    tail = np.array(trace[100:])
    bound = 10.0 / np.arange(101, 1001)
    assert np.all(tail <= bound)


# --- vi_epsilon --------------------------------------------------------------------

def test_vi_epsilon_single_path_is_zero():
    net, demands = _single_class_problem(single_link_net(), {(1, 2): 7.0})
    model = CostModel(net, GROUND_TRUTHS["bpr015"])
    assert vi_epsilon(FlowState(np.array([[7.0]])), net, demands, model) == 0.0


def test_vi_epsilon_symmetric_split_is_zero():
    net, demands = _single_class_problem(parallel_net(), {(1, 2): 10.0})
    model = CostModel(net, GROUND_TRUTHS["bpr015"])
    flows = FlowState(np.array([[5.0], [5.0]]))
    assert vi_epsilon(flows, net, demands, model) == pytest.approx(0.0, abs=1e-12)


def test_vi_epsilon_analytic_imbalance():
    # m = t0 = 1, f = 1 + z, all demand d on link 1:
    # total cost d(1 + d), frozen best d * 1, gap d^2
    d = 2.0
    spec = parallel_net((1.0, 1.0), (1.0, 1.0))
    net, demands = _single_class_problem(spec, {(1, 2): d})
    model = CostModel(net, PolynomialCost((1.0, 1.0)))
    flows = FlowState(np.array([[d], [0.0]]))
    assert vi_epsilon(flows, net, demands, model) == pytest.approx(d * d)


def test_vi_epsilon_rejects_infeasible_flows():
    net, demands = _single_class_problem(single_link_net(), {(1, 2): 7.0})
    model = CostModel(net, GROUND_TRUTHS["bpr015"])
    with pytest.raises(ValueError, match="balance"):
        vi_epsilon(FlowState(np.array([[3.0]])), net, demands, model)


def test_relative_vi_epsilon_zero_flow():
    net, demands = _single_class_problem(single_link_net(), {(1, 2): 0.0})
    model = CostModel(net, GROUND_TRUTHS["bpr015"])
    assert relative_vi_epsilon(FlowState(np.zeros((1, 1))), net, demands, model) == 0.0
