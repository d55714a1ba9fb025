"""QP solver: known optima, a brute-force cross-check, certification rules,
the refinement hook, and the text dump format."""
from __future__ import annotations

import io

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import enumerate_qp_solution, random_qp
from tapcost import QpProblem, dump_qp, kkt_residuals, load_qp, solve_qp

INF = float("inf")


def scalar_qp(u: float = 1.0) -> QpProblem:
    """min (z - 2)^2 subject to z <= u."""
    return QpProblem(
        sp.csc_matrix([[2.0]]), np.array([-4.0]),
        sp.csc_matrix([[1.0]]), np.array([-INF]), np.array([u]),
    )


def projection_qp() -> QpProblem:
    """Nearest nonnegative point to (3, -2); optimum (3, 0)."""
    return QpProblem(
        sp.eye(2, format="csc") * 2.0, np.array([-6.0, 4.0]),
        sp.eye(2, format="csc"), np.zeros(2), np.full(2, INF),
    )


# --- validation ---


def test_rejects_nonsquare_p():
    with pytest.raises(ValueError, match="square"):
        QpProblem(sp.csc_matrix(np.ones((2, 3))), np.zeros(3),
                  sp.csc_matrix((1, 3)), np.zeros(1), np.zeros(1))


def test_rejects_wrong_q_length():
    with pytest.raises(ValueError, match="q must have shape"):
        QpProblem(sp.eye(2, format="csc"), np.zeros(3),
                  sp.csc_matrix((1, 2)), np.zeros(1), np.zeros(1))


def test_rejects_wrong_a_columns():
    with pytest.raises(ValueError, match="columns"):
        QpProblem(sp.eye(2, format="csc"), np.zeros(2),
                  sp.csc_matrix((1, 3)), np.zeros(1), np.zeros(1))


def test_rejects_wrong_bound_length():
    with pytest.raises(ValueError, match="one entry per row"):
        QpProblem(sp.eye(2, format="csc"), np.zeros(2),
                  sp.csc_matrix((2, 2)), np.zeros(1), np.zeros(2))


def test_rejects_nan_bounds():
    with pytest.raises(ValueError, match="NaN"):
        QpProblem(sp.eye(1, format="csc"), np.zeros(1),
                  sp.eye(1, format="csc"), np.array([np.nan]), np.ones(1))


def test_rejects_crossed_bounds_with_row_index():
    with pytest.raises(ValueError, match="row 1"):
        QpProblem(sp.eye(1, format="csc"), np.zeros(1),
                  sp.csc_matrix(np.ones((2, 1))),
                  np.array([0.0, 2.0]), np.array([1.0, 1.0]))


def test_rejects_asymmetric_p():
    with pytest.raises(ValueError, match="symmetric"):
        QpProblem(sp.csc_matrix([[1.0, 1.0], [0.0, 1.0]]), np.zeros(2),
                  sp.csc_matrix((1, 2)), np.zeros(1), np.zeros(1))


def test_rejects_nonpositive_tolerances():
    with pytest.raises(ValueError, match="positive"):
        solve_qp(scalar_qp(), tol_primal=0.0)


# --- known optima ---


def test_scalar_bound_active():
    sol = solve_qp(scalar_qp(u=1.0))
    assert sol.status == "optimal"
    assert sol.z[0] == pytest.approx(1.0, abs=1e-7)
    # stationarity 2z - 4 + y = 0 at z = 1
    assert sol.duals[0] == pytest.approx(2.0, abs=1e-6)
    assert sol.objective == pytest.approx(-3.0, abs=1e-6)


def test_scalar_bound_inactive():
    sol = solve_qp(scalar_qp(u=5.0))
    assert sol.status == "optimal"
    assert sol.z[0] == pytest.approx(2.0, abs=1e-7)
    assert sol.duals[0] == pytest.approx(0.0, abs=1e-6)


def test_projection_onto_orthant():
    sol = solve_qp(projection_qp())
    assert sol.status == "optimal"
    assert sol.z == pytest.approx([3.0, 0.0], abs=1e-7)


def test_equality_constrained_split():
    # min z1^2 + z2^2 with z1 + z2 = 1 -> (0.5, 0.5), multiplier -1
    prob = QpProblem(
        sp.eye(2, format="csc") * 2.0, np.zeros(2),
        sp.csc_matrix([[1.0, 1.0]]), np.ones(1), np.ones(1),
    )
    sol = solve_qp(prob)
    assert sol.status == "optimal"
    assert sol.z == pytest.approx([0.5, 0.5], abs=1e-8)
    assert sol.duals[0] == pytest.approx(-1.0, abs=1e-7)


def test_infeasible_detected():
    prob = QpProblem(
        sp.eye(1, format="csc"), np.zeros(1),
        sp.csc_matrix([[1.0], [1.0]]),
        np.array([1.0, -INF]), np.array([INF, 0.0]),
    )
    sol = solve_qp(prob)
    assert sol.status == "infeasible-detected"
    assert np.all(np.isnan(sol.z))
    assert sol.primal_residual == INF


def test_iteration_cap_reports_partial_result():
    rng = np.random.default_rng(3)
    sol = solve_qp(random_qp(rng), max_iters=4)
    assert sol.status == "max-iters"
    assert np.all(np.isfinite(sol.z))
    assert np.isfinite(sol.primal_residual)


def test_optimal_certifies_unscaled_residuals():
    tol = 1e-8
    sol = solve_qp(projection_qp(), tol_primal=tol, tol_dual=tol)
    resid = kkt_residuals(projection_qp(), sol.z, sol.duals)
    assert resid["primal"] <= tol
    assert resid["dual"] <= tol
    assert resid["comp"] <= 10.0 * tol


def test_determinism_bitwise():
    rng = np.random.default_rng(11)
    prob = random_qp(rng)
    a = solve_qp(prob)
    b = solve_qp(prob)
    assert (a.z == b.z).all()
    assert (a.duals == b.duals).all()
    assert a.iterations == b.iterations


def test_objective_scaling_keeps_minimizer():
    prob = scalar_qp(u=1.0)
    alpha = 8.0
    scaled = QpProblem(prob.P * alpha, prob.q * alpha, prob.A, prob.l, prob.u)
    base = solve_qp(prob)
    amp = solve_qp(scaled)
    assert amp.z[0] == pytest.approx(base.z[0], abs=1e-7)
    assert amp.duals[0] == pytest.approx(alpha * base.duals[0], rel=1e-5)


# --- brute-force cross-check on random instances ---


def test_matches_active_set_enumeration():
    rng = np.random.default_rng(20260815)
    checked = 0
    for _ in range(24):
        prob = random_qp(rng)
        z_ref, _, obj_ref = enumerate_qp_solution(prob)
        sol = solve_qp(prob, tol_primal=1e-8, tol_dual=1e-8)
        assert sol.status == "optimal"
        assert np.max(np.abs(sol.z - z_ref)) <= 1e-6
        assert abs(sol.objective - obj_ref) <= 1e-6
        checked += 1
    assert checked >= 20


# --- KKT residual bookkeeping ---


def test_kkt_residuals_at_exact_optimum_vanish():
    resid = kkt_residuals(scalar_qp(u=1.0), np.array([1.0]), np.array([2.0]))
    assert resid == {"primal": 0.0, "dual": 0.0, "comp": 0.0}


def test_kkt_residuals_flag_stationarity_gap():
    resid = kkt_residuals(scalar_qp(u=1.0), np.array([1.0]), np.array([0.0]))
    assert resid["dual"] == pytest.approx(2.0)
    assert resid["primal"] == 0.0


def test_kkt_residuals_charge_slack_times_multiplier():
    # multiplier 2 pressing an upper bound with slack 0.5
    resid = kkt_residuals(scalar_qp(u=1.0), np.array([0.5]), np.array([2.0]))
    assert resid["comp"] == pytest.approx(1.0)


def test_kkt_residuals_charge_multiplier_on_infinite_bound():
    # negative multiplier claims the lower bound, but the bound is -inf
    resid = kkt_residuals(scalar_qp(u=1.0), np.array([0.5]), np.array([-1.5]))
    assert resid["comp"] == pytest.approx(1.5)


def test_kkt_residuals_report_worst_bound_violation():
    resid = kkt_residuals(scalar_qp(u=1.0), np.array([1.75]), np.array([0.0]))
    assert resid["primal"] == pytest.approx(0.75)


# --- refinement hook ---


def test_refine_hook_exact_candidate_is_adopted():
    exact_z = np.array([3.0, 0.0])
    exact_duals = np.array([0.0, -4.0])

    def refine(z, duals):
        return exact_z.copy(), exact_duals.copy()

    sol = solve_qp(projection_qp(), tol_primal=1e-12, tol_dual=1e-12,
                   refine=refine)
    assert sol.status == "optimal"
    assert (sol.z == exact_z).all()
    assert (sol.duals == exact_duals).all()


def test_refine_hook_none_is_ignored():
    calls = []

    def refine(z, duals):
        calls.append(1)
        return None

    sol = solve_qp(projection_qp(), refine=refine)
    assert sol.status == "optimal"
    assert calls


def test_refine_hook_bad_candidates_are_ignored():
    def wrong_shape(z, duals):
        return np.zeros(5), duals

    def not_finite(z, duals):
        return np.full_like(z, np.nan), duals

    for hook in (wrong_shape, not_finite):
        sol = solve_qp(projection_qp(), refine=hook)
        assert sol.status == "optimal"
        assert sol.z == pytest.approx([3.0, 0.0], abs=1e-7)


def test_refine_hook_receives_copies():
    prob = projection_qp()

    def vandal(z, duals):
        z[:] = 1e9
        duals[:] = -1e9
        return None

    sol = solve_qp(prob, refine=vandal)
    assert sol.status == "optimal"
    assert sol.z == pytest.approx([3.0, 0.0], abs=1e-7)


# --- text dump round-trip ---


def assert_problems_equal(a: QpProblem, b: QpProblem) -> None:
    assert (a.P.toarray() == b.P.toarray()).all()
    assert (a.A.toarray() == b.A.toarray()).all()
    assert (a.q == b.q).all()
    assert (a.l == b.l).all()
    assert (a.u == b.u).all()


def test_dump_load_round_trip_via_path(tmp_path):
    prob = random_qp(np.random.default_rng(5))
    path = tmp_path / "prob.qp"
    dump_qp(prob, path)
    assert_problems_equal(prob, load_qp(path))
    dump_qp(prob, str(path))
    assert_problems_equal(prob, load_qp(str(path)))


def test_dump_load_round_trip_via_stream():
    prob = random_qp(np.random.default_rng(6))
    buf = io.StringIO()
    dump_qp(prob, buf)
    buf.seek(0)
    assert_problems_equal(prob, load_qp(buf))


def test_loaded_problem_solves_identically():
    prob = random_qp(np.random.default_rng(7))
    buf = io.StringIO()
    dump_qp(prob, buf)
    buf.seek(0)
    reloaded = load_qp(buf)
    assert (solve_qp(prob).z == solve_qp(reloaded).z).all()


def test_load_rejects_missing_section():
    with pytest.raises(ValueError, match="expected 'dims'"):
        load_qp(io.StringIO("P 0\n"))


finite = st.floats(
    allow_nan=False, allow_infinity=False, min_value=-1e6, max_value=1e6
)


@st.composite
def qp_problems(draw):
    n = draw(st.integers(1, 4))
    m = draw(st.integers(1, 3))
    mat = np.array(
        draw(st.lists(st.lists(finite, min_size=n, max_size=n),
                      min_size=n, max_size=n))
    )
    a_mat = np.array(
        draw(st.lists(st.lists(finite, min_size=n, max_size=n),
                      min_size=m, max_size=m))
    )
    q = np.array(draw(st.lists(finite, min_size=n, max_size=n)))
    lo = np.array(draw(st.lists(finite, min_size=m, max_size=m)))
    width = np.array(
        draw(st.lists(st.floats(min_value=0.0, max_value=1e6,
                                allow_nan=False), min_size=m, max_size=m))
    )
    # element-wise float addition commutes, so mat + mat.T is exactly symmetric
    return QpProblem(mat + mat.T, q, a_mat, lo, lo + width)


@settings(max_examples=60, deadline=None)
@given(qp_problems())
def test_dump_load_round_trip_exact(prob):
    buf = io.StringIO()
    dump_qp(prob, buf)
    buf.seek(0)
    assert_problems_equal(prob, load_qp(buf))
