"""Latency-function recovery from observed equilibrium flows.

Given one or more (demand, equilibrium flow) observations on a shared
network, the congestion function is recovered by minimizing equilibrium
violation: a flow is an equilibrium for candidate costs exactly when its
primal cost matches the best dual (shortest-path potential) value, so the
estimator searches polynomial coefficients beta and per-OD node potentials
that make the duality gap of every observation as small as possible, with a
kernel-weighted ridge penalty on beta for conditioning.

The search is one convex sparse QP.  Variable layout: node-potential blocks
(observation-major, then class-major, then OD ascending), the n+1 polynomial
coefficients, one slack per observation.  Row layout: dual-feasibility rows
(one per potential block and link), one gap row per observation, the
monotonicity chain, the beta_0 = 1 pin, and slack nonnegativity.

:func:`assemble_qp` materializes that program literally.  :func:`estimate`
solves an exactly equivalent presolved instance instead: potential blocks of
OD pairs sharing (class, origin) are merged (one distance vector maximizes
every destination's dual value simultaneously, and only the summed dual
value enters the gap row), and the instance is diagonally rescaled
(coefficients expressed for powers of z/z_ref, slacks per unit of
free-flow-weighted cost, monotonicity rows per unit of ratio gap).  Both
transformations are invertible and leave the optimal beta unchanged; the
applied scales are recorded in the VariableMap and undone on extraction.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from math import comb
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .cost import PolynomialCost, congestion_ratios
from .network import DemandSet, FlowState, MulticlassNetwork, shortest_path_tree
from .qp import QpProblem, QpSolution, solve_qp

SLACK_NORMS = ("squared-l2", "l1")


class EstimationError(RuntimeError):
    """QP solve did not certify the requested accuracy; carries the raw solution."""

    def __init__(self, message: str, solution: QpSolution | None = None):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class Observation:
    """One demand scenario with its observed per-class link flows."""

    network: MulticlassNetwork
    demands: DemandSet
    flows: FlowState

    def __post_init__(self):
        net = self.network
        if self.flows.x.shape != (net.n_links, net.n_classes):
            raise ValueError(
                f"flow shape {self.flows.x.shape} does not match network "
                f"({net.n_links}, {net.n_classes})"
            )
        if self.demands.n_classes != net.n_classes:
            raise ValueError("demand class count does not match network")
        for u, table in enumerate(self.demands.by_class):
            origins = {o for (o, d), v in table.items() if v > 0}
            for o in origins:
                seen = _reachable_from(net, o)
                for (oo, d), v in table.items():
                    if oo == o and v > 0 and not seen[d - 1]:
                        raise ValueError(
                            f"class {u}: demand from {o} to {d} is positive "
                            "but the destination is unreachable"
                        )


def _reachable_from(net: MulticlassNetwork, origin: int) -> np.ndarray:
    seen = np.zeros(net.n_nodes, dtype=bool)
    seen[origin - 1] = True
    stack = [origin - 1]
    while stack:
        v = stack.pop()
        for a in net.out_links[net.out_start[v] : net.out_start[v + 1]]:
            w = net.head[a]
            if not seen[w]:
                seen[w] = True
                stack.append(int(w))
    return seen


@dataclass(frozen=True)
class EstimationConfig:
    """Estimator knobs: polynomial degree, kernel width, ridge weight."""

    degree_n: int
    kernel_c: float
    gamma: float
    slack_norm: str = "l1"

    def __post_init__(self):
        if self.degree_n < 1:
            raise ValueError("polynomial degree must be at least 1")
        if not self.kernel_c > 0:
            raise ValueError(
                f"kernel width must be positive, got {self.kernel_c}"
            )
        if not self.gamma > 0:
            raise ValueError("regularizer weight must be positive")
        if self.slack_norm not in SLACK_NORMS:
            raise ValueError(f"slack_norm must be one of {SLACK_NORMS}")


def regularizer_weights(degree_n: int, kernel_c: float) -> np.ndarray:
    """Ridge weight per coefficient: 1 / (C(n, j) * c^(n-j)), j = 0..n.

    Derived from a polynomial-kernel feature map: high-order coefficients
    are cheap when the kernel width c is large and expensive when it is
    small.  c = 0 is rejected because the weight is undefined for j < n.
    """
    if degree_n < 1:
        raise ValueError("polynomial degree must be at least 1")
    if not kernel_c > 0:
        raise ValueError(f"kernel width must be positive, got {kernel_c}")
    n = degree_n
    return np.array(
        [1.0 / (comb(n, j) * kernel_c ** (n - j)) for j in range(n + 1)]
    )


def monotonicity_chain(ratios: np.ndarray) -> list[tuple[int, int]]:
    """Adjacent index pairs enforcing f nondecreasing at the given ratios.

    Ratios are sorted, exact duplicates are merged (keeping the smallest
    original index as representative), and each consecutive pair (lower,
    higher) becomes one constraint.  Enforcing adjacent pairs implies every
    other ordered pair by transitivity.
    """
    z = np.asarray(ratios, dtype=float)
    order = np.argsort(z, kind="stable")
    reps: list[int] = []
    last = None
    for idx in order:
        if last is None or z[idx] != last:
            reps.append(int(idx))
            last = z[idx]
    return [(reps[i], reps[i + 1]) for i in range(len(reps) - 1)]


@dataclass(frozen=True)
class VariableMap:
    """Column/row bookkeeping plus the scales applied during assembly.

    ``block_keys[k]`` identifies the potential blocks of observation k in
    column order: ``(u, o, d)`` triples in the literal per-OD layout,
    ``(u, o)`` pairs when origin-merged.  ``z_ref``/``slack_scale``/
    ``obj_scale`` record the exact reparametrization (1.0 everywhere for a
    natural-units assembly): column beta_j holds beta_j * z_ref**j, the
    slack column of observation k holds eps_k / slack_scale[k], and the
    objective was multiplied by obj_scale.
    """

    n_vars: int
    n_cons: int
    beta_cols: np.ndarray
    eps_cols: np.ndarray
    y_start: tuple[int, ...]
    od_order: tuple[tuple[tuple[int, int, int], ...], ...]
    block_keys: tuple[tuple[tuple, ...], ...]
    block_size: int
    restricted: bool
    n_nodes: int
    dual_start: tuple[int, ...]
    dual_rows_per_block: int
    gap_row: tuple[int, ...]
    mono_rows: range
    beta0_row: int
    eps_rows: range
    z_ref: float = 1.0
    slack_scale: tuple[float, ...] = ()
    obj_scale: float = 1.0

    @property
    def merged(self) -> bool:
        return bool(self.block_keys) and bool(self.block_keys[0]) and len(
            self.block_keys[0][0]
        ) == 2

    def y_cols(self, k: int, u: int, o: int, d: int) -> np.ndarray:
        """Columns of the potential block serving OD (o, d) of class u."""
        key = (u, o) if self.merged else (u, o, d)
        w = self.block_keys[k].index(key)
        start = self.y_start[k] + w * self.block_size
        return np.arange(start, start + self.block_size)

    def extract_beta(self, z: np.ndarray) -> np.ndarray:
        powers = np.arange(len(self.beta_cols))
        return z[self.beta_cols] / self.z_ref**powers

    def extract_epsilons(self, z: np.ndarray) -> np.ndarray:
        scale = np.asarray(self.slack_scale or (1.0,) * len(self.eps_cols))
        return z[self.eps_cols] * scale


def _blocks_for(
    demands: DemandSet, merge_origins: bool
) -> tuple[tuple, ...]:
    """Potential-block keys in column order for one observation."""
    keys: list[tuple] = []
    for u, table in enumerate(demands.by_class):
        if merge_origins:
            keys.extend((u, o) for o in sorted({o for o, _ in table}))
        else:
            keys.extend((u, o, d) for (o, d) in sorted(table))
    return tuple(keys)


def _od_order(demands: DemandSet) -> tuple[tuple[int, int, int], ...]:
    out: list[tuple[int, int, int]] = []
    for u, table in enumerate(demands.by_class):
        out.extend((u, o, d) for (o, d) in sorted(table))
    return tuple(out)


def _regularizer_terms(
    varmap: VariableMap, cfg: EstimationConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Objective (P diagonal, q) consistent with the map's recorded scales."""
    weights = regularizer_weights(cfg.degree_n, cfg.kernel_c)
    powers = np.arange(cfg.degree_n + 1)
    p_diag = np.zeros(varmap.n_vars)
    q = np.zeros(varmap.n_vars)
    p_diag[varmap.beta_cols] = (
        2.0 * cfg.gamma * varmap.obj_scale * weights / varmap.z_ref ** (2 * powers)
    )
    slack_scale = np.asarray(varmap.slack_scale or (1.0,) * len(varmap.eps_cols))
    if cfg.slack_norm == "squared-l2":
        p_diag[varmap.eps_cols] = 2.0 * varmap.obj_scale * slack_scale**2
    else:
        q[varmap.eps_cols] = varmap.obj_scale * slack_scale
    return p_diag, q


def _assemble(
    observations: Sequence[Observation],
    cfg: EstimationConfig,
    restrict_duals: bool,
    monotonicity: str,
    merge_origins: bool,
    conditioned: bool,
) -> tuple[QpProblem, VariableMap]:
    if not observations:
        raise ValueError("need at least one observation")
    if monotonicity not in ("chain", "all-pairs"):
        raise ValueError(f"unknown monotonicity mode {monotonicity!r}")
    net = observations[0].network
    for obs in observations[1:]:
        if obs.network is not net:
            raise ValueError("all observations must share one network")
    n_nodes, n_links, n_classes = net.n_nodes, net.n_links, net.n_classes
    n_beta = cfg.degree_n + 1
    n_obs = len(observations)
    block = n_nodes if restrict_duals else n_nodes * n_classes
    rows_per_block = n_links if restrict_duals else n_links * n_classes

    od_order = tuple(_od_order(obs.demands) for obs in observations)
    block_keys = tuple(
        _blocks_for(obs.demands, merge_origins) for obs in observations
    )
    y_start = []
    pos = 0
    for k in range(n_obs):
        y_start.append(pos)
        pos += block * len(block_keys[k])
    beta_cols = np.arange(pos, pos + n_beta)
    eps_cols = np.arange(pos + n_beta, pos + n_beta + n_obs)
    n_vars = pos + n_beta + n_obs

    dual_start = []
    row = 0
    for k in range(n_obs):
        dual_start.append(row)
        row += rows_per_block * len(block_keys[k])
    gap_row = tuple(range(row, row + n_obs))
    row += n_obs

    zk = [congestion_ratios(obs.flows, net) for obs in observations]
    all_z = np.concatenate(zk)
    if monotonicity == "chain":
        pairs = monotonicity_chain(all_z)
    else:
        uniq = np.unique(all_z)
        first = {v: int(np.nonzero(all_z == v)[0][0]) for v in uniq}
        pairs = [
            (first[uniq[i]], first[uniq[j]])
            for i in range(len(uniq))
            for j in range(len(uniq))
            if uniq[i] < uniq[j]
        ]
    mono_rows = range(row, row + len(pairs))
    row += len(pairs)
    beta0_row = row
    row += 1
    eps_rows = range(row, row + n_obs)
    n_cons = row + n_obs

    sk = [float((net.t0_class * obs.flows.x).sum()) for obs in observations]
    if conditioned:
        z_ref = float(max(all_z.max(initial=0.0), 0.0)) or 1.0
        slack_scale = tuple(s if s > 0 else 1.0 for s in sk)
        obj_scale = 1.0 / max(slack_scale)
        if cfg.slack_norm == "squared-l2":
            obj_scale = obj_scale**2
    else:
        z_ref = 1.0
        slack_scale = (1.0,) * n_obs
        obj_scale = 1.0

    powers = np.arange(n_beta)
    # basis powers of z / z_ref; identical to plain powers when unconditioned
    Zk = [np.power((z / z_ref)[:, None], powers[None, :]) for z in zk]

    ri: list[np.ndarray] = []
    ci: list[np.ndarray] = []
    vi: list[np.ndarray] = []

    def put(r, c, v):
        ri.append(np.asarray(r, dtype=np.int64).ravel())
        ci.append(np.asarray(c, dtype=np.int64).ravel())
        vi.append(np.asarray(v, dtype=float).ravel())

    head, tail = net.head, net.tail
    for k, obs in enumerate(observations):
        Z = Zk[k]
        keys = block_keys[k]
        n_w = len(keys)
        w_class = np.fromiter((key[0] for key in keys), dtype=np.int64, count=n_w)
        w_idx = np.arange(n_w)
        copies = [None] if restrict_duals else list(range(n_classes))
        for u_copy in copies:
            rows = (
                dual_start[k]
                + np.repeat(w_idx, n_links) * rows_per_block
                + (0 if u_copy is None else u_copy * n_links)
                + np.tile(np.arange(n_links), n_w)
            )
            col_base = (
                y_start[k]
                + np.repeat(w_idx, n_links) * block
                + (0 if u_copy is None else u_copy * n_nodes)
            )
            put(rows, col_base + np.tile(head, n_w), np.ones(rows.size))
            put(rows, col_base + np.tile(tail, n_w), -np.ones(rows.size))
            if u_copy is None:
                # each block prices links with its own class's free-flow time
                V = net.t0_class.T[:, :, None] * Z[None, :, :]
                vals = -V[w_class].reshape(-1)
            else:
                V = net.t0_class[:, u_copy][:, None] * Z
                vals = -np.tile(V.reshape(-1), n_w)
            put(np.repeat(rows, n_beta), np.tile(beta_cols, rows.size), vals)

        s = (net.t0_class * obs.flows.x).sum(axis=1)
        put(
            np.full(n_beta, gap_row[k]),
            beta_cols,
            (Z.T @ s) / slack_scale[k],
        )
        key_pos = {key: w for w, key in enumerate(keys)}
        class_off = 0 if restrict_duals else n_nodes  # per-class node offset
        for u, table in enumerate(obs.demands.by_class):
            for (o, d), v in sorted(table.items()):
                if v == 0:
                    continue
                w = key_pos[(u, o) if merge_origins else (u, o, d)]
                off = y_start[k] + w * block + class_off * u
                scaled = v / slack_scale[k]
                put(
                    [gap_row[k], gap_row[k]],
                    [off + d - 1, off + o - 1],
                    [-scaled, scaled],
                )
        put([gap_row[k]], [eps_cols[k]], [-1.0])

    if pairs:
        Zall = np.power((all_z / z_ref)[:, None], powers[None, :])
        lo = np.array([p for p, _ in pairs])
        hi = np.array([p for _, p in pairs])
        diff = Zall[lo, 1:] - Zall[hi, 1:]  # constant terms cancel
        if conditioned:
            diff = diff / (all_z[hi] - all_z[lo])[:, None]
        rows = np.repeat(np.asarray(mono_rows, dtype=np.int64), n_beta - 1)
        cols = np.tile(beta_cols[1:], len(pairs))
        put(rows, cols, diff.reshape(-1))

    put([beta0_row], [beta_cols[0]], [1.0])
    put(np.asarray(eps_rows), eps_cols, np.ones(n_obs))

    A = sp.coo_matrix(
        (np.concatenate(vi), (np.concatenate(ri), np.concatenate(ci))),
        shape=(n_cons, n_vars),
    ).tocsc()
    A.sum_duplicates()

    l = np.full(n_cons, -np.inf)
    u = np.zeros(n_cons)
    l[beta0_row] = u[beta0_row] = 1.0
    l[np.asarray(eps_rows)] = 0.0
    u[np.asarray(eps_rows)] = np.inf

    varmap = VariableMap(
        n_vars=n_vars,
        n_cons=n_cons,
        beta_cols=beta_cols,
        eps_cols=eps_cols,
        y_start=tuple(y_start),
        od_order=od_order,
        block_keys=block_keys,
        block_size=block,
        restricted=restrict_duals,
        n_nodes=n_nodes,
        dual_start=tuple(dual_start),
        dual_rows_per_block=rows_per_block,
        gap_row=gap_row,
        mono_rows=mono_rows,
        beta0_row=beta0_row,
        eps_rows=eps_rows,
        z_ref=z_ref,
        slack_scale=slack_scale,
        obj_scale=obj_scale,
    )
    p_diag, q = _regularizer_terms(varmap, cfg)
    problem = QpProblem(sp.diags(p_diag, format="csc"), q, A, l, u)
    return problem, varmap


def assemble_qp(
    observations: Sequence[Observation],
    cfg: EstimationConfig,
    restrict_duals: bool = True,
    monotonicity: str = "chain",
) -> tuple[QpProblem, VariableMap]:
    """Build the estimation QP literally, one potential block per OD pair.

    ``restrict_duals=True`` keeps, for each OD of class u, only the
    potential entries of class u's network copy; the dropped entries of the
    other copies are never referenced by the objective and can always be
    chosen feasibly, so the optimal beta is unchanged.  ``monotonicity``
    selects the adjacent-pair chain or, for cross-checking, one row per
    ordered pair of distinct observed ratios ("all-pairs").

    Coefficients are in natural units (powers of the raw ratios, absolute
    slacks); :func:`estimate` applies an equivalent conditioned form
    instead, see the module docstring.
    """
    return _assemble(
        observations,
        cfg,
        restrict_duals=restrict_duals,
        monotonicity=monotonicity,
        merge_origins=False,
        conditioned=False,
    )


def assemble_reduced_qp(
    observations: Sequence[Observation],
    cfg: EstimationConfig,
    monotonicity: str = "chain",
) -> tuple[QpProblem, VariableMap]:
    """The origin-merged, rescaled assembly :func:`estimate` solves.

    Exactly equivalent to :func:`assemble_qp` in its optimal beta and
    slacks; see the module docstring for the reduction argument.
    """
    return _assemble(
        observations,
        cfg,
        restrict_duals=True,
        monotonicity=monotonicity,
        merge_origins=True,
        conditioned=True,
    )


def reweighted(
    problem: QpProblem, varmap: VariableMap, cfg: EstimationConfig
) -> QpProblem:
    """Clone a problem with new regularizer/slack weights, reusing A.

    The constraint matrix depends only on the polynomial degree and the
    observations, so sweeping kernel width and ridge weight can share one
    assembly.  The degree must match the assembled one.
    """
    if len(varmap.beta_cols) != cfg.degree_n + 1:
        raise ValueError(
            f"assembled for degree {len(varmap.beta_cols) - 1}, "
            f"got config degree {cfg.degree_n}"
        )
    # the recorded objective scale depends on the slack norm, so rebuild it
    # for the requested one (squared slacks square the rescaling)
    base = 1.0 / max(varmap.slack_scale) if varmap.slack_scale else 1.0
    obj_scale = base**2 if cfg.slack_norm == "squared-l2" else base
    p_diag, q = _regularizer_terms(replace(varmap, obj_scale=obj_scale), cfg)
    return QpProblem(
        sp.diags(p_diag, format="csc"), q, problem.A, problem.l, problem.u
    )


# stabilized cutting-plane steps taken inside one refinement call; the
# certificate in solve_qp decides acceptance, so a small fixed count suffices
_REFINE_ROUNDS = 5
_REFINE_PROX = 1.0


def _make_refine(
    problem: QpProblem,
    varmap: VariableMap,
    observations: Sequence[Observation],
) -> Callable[[np.ndarray, np.ndarray], "tuple[np.ndarray, np.ndarray] | None"]:
    """Structural improvement hook for an assembled estimation QP.

    For a fixed polynomial the remaining variables are optimal in closed
    form: each potential block is the shortest-path distance vector under
    link costs t0 * f(z), and each slack is the positive part of its gap
    row.  A first-order iterate therefore only carries real information in
    beta, so this hook improves beta with a few proximal cutting-plane
    steps (each cut fixes the shortest paths, making the dual value linear
    in beta; the monotonicity rows are enforced exactly), then rebuilds the
    full vector from the best beta found.  The candidate satisfies the
    potential, gap, pin, and slack-sign rows to machine precision.  It is
    returned with the backend's dual vector: no objective or constraint
    gradient involves the potentials, and with absolute slacks none
    involves the slack coordinates either, so the stationarity residual is
    inherited from the backend iterate.
    """
    net = observations[0].network
    A_csr = problem.A.tocsr()
    n_beta = len(varmap.beta_cols)
    powers = np.arange(n_beta)
    beta_cols = varmap.beta_cols
    eps_cols = varmap.eps_cols
    n_obs = len(observations)
    n_nodes = varmap.n_nodes
    zk = [congestion_ratios(obs.flows, net) for obs in observations]
    Zk = [np.power((z / varmap.z_ref)[:, None], powers[None, :]) for z in zk]
    slack = np.asarray(varmap.slack_scale or (1.0,) * n_obs)

    # block index, class, origin, and positive-demand destinations, per obs
    blocks: list[list[tuple[int, int, int, list[tuple[int, float]]]]] = []
    for k, obs in enumerate(observations):
        by_uo: dict[tuple[int, int], list[tuple[int, float]]] = {}
        for u, table in enumerate(obs.demands.by_class):
            for (o, d), v in sorted(table.items()):
                if v > 0:
                    by_uo.setdefault((u, o), []).append((d, v))
        per_k = []
        for w, key in enumerate(varmap.block_keys[k]):
            if varmap.merged:
                u, o = key
                dests = by_uo.get((u, o), [])
            else:
                u, o, d = key
                v = obs.demands.by_class[u].get((o, d), 0.0)
                dests = [(d, v)] if v > 0 else []
            per_k.append((w, u, o, dests))
        blocks.append(per_k)

    mono_rows = np.asarray(varmap.mono_rows, dtype=np.int64)
    if mono_rows.size:
        mono_M = A_csr[mono_rows][:, beta_cols[1:]].toarray()
    else:
        mono_M = np.zeros((0, n_beta - 1))
    gap_rows = np.asarray(varmap.gap_row, dtype=np.int64)
    c_gap = np.vstack(
        [A_csr[g].toarray().ravel()[beta_cols] for g in gap_rows]
    )
    u_gap = problem.u[gap_rows]
    p_beta = problem.P.diagonal()[beta_cols]
    p_eps = problem.P.diagonal()[eps_cols]
    q_eps = problem.q[eps_cols]

    def _paths(beta_t: np.ndarray):
        """Distances per block column and cut coefficients at this beta."""
        y_parts: list[tuple[int, np.ndarray]] = []
        phat = np.zeros((n_obs, n_beta))
        for k in range(n_obs):
            fz = Zk[k] @ beta_t
            if not np.all(np.isfinite(fz)) or fz.min() <= 0.0:
                return None
            trees: dict[tuple[int, int], object] = {}

            def tree_for(u: int, o: int):
                key = (u, o)
                if key not in trees:
                    trees[key] = shortest_path_tree(
                        net, o, net.t0_class[:, u] * fz
                    )
                return trees[key]

            for w, u, o, dests in blocks[k]:
                base = varmap.y_start[k] + w * varmap.block_size
                copies = (u,) if varmap.restricted else range(net.n_classes)
                for u_copy in copies:
                    tree = tree_for(u_copy, o)
                    yb = np.asarray(tree.dist, dtype=float)
                    bad = ~np.isfinite(yb)
                    if bad.any():
                        # nodes unreachable from o have no incoming row from
                        # the reachable side; any common large value works
                        top = (
                            yb[~bad].max()
                            + float(net.t0_class[:, u_copy].max()) * fz.max()
                            + 1.0
                        )
                        yb = np.where(bad, top, yb)
                    off = base + (0 if varmap.restricted else u_copy * n_nodes)
                    y_parts.append((off, yb))
                tree = tree_for(u, o)
                load = np.zeros(net.n_links)
                for d, v in dests:
                    node = d
                    while node != o:
                        li = tree.pred_link[node - 1]
                        if li < 0:
                            return None
                        load[li] += v
                        node = tree.pred_node[node - 1]
                phat[k] += Zk[k].T @ (net.t0_class[:, u] * load)
        return y_parts, phat

    def _objective(beta_t: np.ndarray, gmat: np.ndarray) -> float:
        val = 0.5 * float(p_beta[1:] @ beta_t[1:] ** 2)
        for k in range(n_obs):
            need = max(0.0, float(gmat[k] @ beta_t) - float(u_gap[k]))
            val += float(q_eps[k]) * need + 0.5 * float(p_eps[k]) * need**2
        return val

    def _master(cuts: list, center: np.ndarray) -> np.ndarray | None:
        nv = (n_beta - 1) + n_obs
        rows, rhs = [], []
        for k, g in cuts:
            coeff = np.zeros(nv)
            coeff[: n_beta - 1] = g[1:]
            coeff[n_beta - 1 + k] = -1.0
            rows.append(coeff)
            rhs.append(float(u_gap[k]) - float(g[0]))
        a_all = np.vstack(
            [
                np.asarray(rows),
                np.hstack([mono_M, np.zeros((mono_M.shape[0], n_obs))]),
                np.hstack([np.zeros((n_obs, n_beta - 1)), np.eye(n_obs)]),
            ]
        )
        l_m = np.concatenate(
            [
                np.full(len(cuts) + mono_M.shape[0], -np.inf),
                np.zeros(n_obs),
            ]
        )
        u_m = np.concatenate(
            [np.asarray(rhs), problem.u[mono_rows], np.full(n_obs, np.inf)]
        )
        master = QpProblem(
            sp.diags(
                np.concatenate([p_beta[1:] + _REFINE_PROX, p_eps]),
                format="csc",
            ),
            np.concatenate([-_REFINE_PROX * center, q_eps]),
            sp.csc_matrix(a_all),
            l_m,
            u_m,
        )
        sol = solve_qp(master, tol_primal=1e-8, tol_dual=1e-8, max_iters=25_000)
        out = sol.z[: n_beta - 1]
        if not np.all(np.isfinite(out)):
            return None
        return out

    def hook(z_raw: np.ndarray, nu_raw: np.ndarray):
        beta_t = np.asarray(z_raw[beta_cols], dtype=float)
        if not np.all(np.isfinite(beta_t)):
            return None
        beta_t[0] = 1.0
        cuts: list = []
        center = beta_t[1:].copy()
        best: tuple[float, np.ndarray] | None = None
        current = beta_t
        from_master = False
        for _ in range(_REFINE_ROUNDS):
            res = _paths(current)
            if res is None:
                break
            _, phat = res
            gmat = c_gap - phat / slack[:, None]
            if from_master:
                obj = _objective(current, gmat)
                if best is None or obj < best[0]:
                    best = (obj, current)
            for k in range(n_obs):
                cuts.append((k, gmat[k]))
            nxt = _master(cuts, center)
            if nxt is None:
                break
            center = nxt.copy()
            moved = np.concatenate([[1.0], nxt])
            stable = from_master and np.abs(moved - current).max() < 1e-12
            current = moved
            from_master = True
            if stable:
                break
        if from_master:
            res = _paths(current)
            if res is not None:
                _, phat = res
                obj = _objective(current, c_gap - phat / slack[:, None])
                if best is None or obj < best[0]:
                    best = (obj, current)
        if best is None:
            return None
        res = _paths(best[1])
        if res is None:
            return None
        y_parts, _ = res
        z_new = np.asarray(z_raw, dtype=float).copy()
        for off, vals in y_parts:
            z_new[off : off + n_nodes] = vals
        z_new[beta_cols] = best[1]
        z_new[eps_cols] = 0.0
        lhs = np.asarray(A_csr[gap_rows] @ z_new).ravel()
        z_new[eps_cols] = np.maximum(0.0, lhs - u_gap)
        return z_new, np.asarray(nu_raw, dtype=float)

    return hook


@dataclass(frozen=True)
class EstimationResult:
    """Recovered polynomial plus solver diagnostics."""

    poly: PolynomialCost
    epsilons: np.ndarray
    qp: QpSolution
    duals: dict[tuple[int, int, int, int], np.ndarray] | None = None


def solve_assembled(
    problem: QpProblem,
    varmap: VariableMap,
    cfg: EstimationConfig,
    tol_primal: float = 1e-6,
    tol_dual: float = 1e-6,
    max_iters: int = 400_000,
    observations: Sequence[Observation] | None = None,
    include_duals: bool = False,
    verbose: bool = False,
) -> EstimationResult:
    """Solve an assembled estimation QP and map the solution back.

    Passing the source ``observations`` enables the structural refinement
    hook (see :func:`_make_refine`), which large instances need to reach
    tight tolerances.  Raises :class:`EstimationError` when the solve does
    not certify the requested accuracy; the estimation QP is feasible by
    construction, so a reported infeasibility is surfaced as an internal
    error.
    """
    refine = (
        _make_refine(problem, varmap, observations) if observations else None
    )
    sol = solve_qp(
        problem,
        tol_primal=tol_primal,
        tol_dual=tol_dual,
        max_iters=max_iters,
        refine=refine,
        verbose=verbose,
    )
    if sol.status == "infeasible-detected":
        raise EstimationError(
            "internal error: the estimation QP is feasible by construction "
            "but the solver certified infeasibility",
            sol,
        )
    if sol.status != "optimal":
        raise EstimationError(
            f"QP solve ended with status {sol.status!r} "
            f"(primal {sol.primal_residual:.2e}, dual {sol.dual_residual:.2e})",
            sol,
        )
    beta = varmap.extract_beta(sol.z)
    if abs(beta[0] - 1.0) > 1e-6:
        raise EstimationError(f"constant coefficient drifted to {beta[0]}", sol)
    beta[0] = 1.0  # pinned by an equality row; snap away the solver tolerance
    epsilons = varmap.extract_epsilons(sol.z)
    duals = None
    if include_duals:
        # merged blocks serve every destination of their origin, so the
        # same potential vector is returned for each OD they cover
        duals = {}
        for k, order in enumerate(varmap.od_order):
            for (u, o, d) in order:
                duals[(k, u, o, d)] = sol.z[varmap.y_cols(k, u, o, d)].copy()
    poly = PolynomialCost(tuple(float(b) for b in beta), kernel_c=cfg.kernel_c)
    return EstimationResult(poly=poly, epsilons=epsilons, qp=sol, duals=duals)


def estimate(
    observations: Sequence[Observation],
    cfg: EstimationConfig,
    tol_primal: float = 1e-6,
    tol_dual: float = 1e-6,
    max_iters: int = 400_000,
    restrict_duals: bool = True,
    monotonicity: str = "chain",
    presolve: bool = True,
    include_duals: bool = False,
    verbose: bool = False,
) -> EstimationResult:
    """Recover the congestion polynomial from equilibrium observations.

    ``presolve=True`` (the default) solves the origin-merged, rescaled
    instance, which is dramatically better conditioned; set it to False to
    solve the literal per-OD program (small instances only).  Requesting
    unrestricted duals forces the literal form.
    """
    problem, varmap = _assemble(
        observations,
        cfg,
        restrict_duals=restrict_duals,
        monotonicity=monotonicity,
        merge_origins=presolve and restrict_duals,
        conditioned=presolve,
    )
    return solve_assembled(
        problem,
        varmap,
        cfg,
        tol_primal=tol_primal,
        tol_dual=tol_dual,
        max_iters=max_iters,
        observations=observations,
        include_duals=include_duals,
        verbose=verbose,
    )
