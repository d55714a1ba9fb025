"""Command-line entry points: assign, estimate, sweep.

``assign`` computes a multi-class equilibrium and writes per-class link
flows; ``estimate`` recovers the congestion function from observed (or, if
none are given, freshly simulated) flows; ``sweep`` repeats the estimation
over grids of polynomial degree, kernel width, and ridge weight.

Exit codes: 0 success, 1 usage/parameter error, 2 data error (missing or
malformed input files, inconsistent dimensions, unroutable demand),
3 solver failure.  All outputs are plain CSV/text with deterministic
content: rerunning a command yields byte-identical files.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from .cost import GROUND_TRUTHS, CostModel, congestion_ratios, sample_curve
from .estimate import (
    EstimationConfig,
    EstimationError,
    Observation,
    assemble_reduced_qp,
    estimate,
    reweighted,
    solve_assembled,
)
from .msa import MsaConfig, UnreachableDemandError, msa_solve, relative_vi_epsilon
from .network import ClassConfig, FlowState, MulticlassNetwork, build_multiclass, split_demand
from .qp import QpSolution
from .tntp import TntpFormatError, parse_network, parse_trips, read_flows_csv, write_flows_csv

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_SOLVER = 3


class UsageError(ValueError):
    """Bad flags, bad config values, or missing required parameters."""


CLASS_PRESETS = {
    "single": ClassConfig.single,
    "cars_trucks": ClassConfig.cars_and_trucks,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs; mirrors the config-file keys."""

    net: Path
    trips: Path
    out: Path = Path("out")
    flows: Path | None = None
    truth: str = "bpr015"  # name in GROUND_TRUTHS, or "none"
    classes: ClassConfig = field(default_factory=ClassConfig.cars_and_trucks)
    epsilon_rg: float = 1e-6
    max_iters: int = 1000
    degree_n: int = 5
    kernel_c: float = 1.0
    gamma: float = 0.1
    slack_norm: str = "l1"
    qp_tol_primal: float = 1e-4
    qp_tol_dual: float = 1e-4
    qp_max_iters: int = 400_000
    sweep_n: tuple[int, ...] = (3, 4, 5, 6)
    sweep_c: tuple[float, ...] = (0.5, 1.0, 1.5)
    sweep_gamma: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0, 100.0)

    def msa_config(self) -> MsaConfig:
        return MsaConfig(epsilon_rg=self.epsilon_rg, max_iters=self.max_iters)

    def estimation_config(self) -> EstimationConfig:
        return EstimationConfig(
            degree_n=self.degree_n,
            kernel_c=self.kernel_c,
            gamma=self.gamma,
            slack_norm=self.slack_norm,
        )


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blanks ignored."""
    out: dict[str, str] = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {no}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise UsageError(f"config line {no}: empty key")
        if key in out:
            raise UsageError(f"config line {no}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def load_config(path: Path) -> ExperimentConfig:
    """Load a config file; relative paths resolve against its directory."""
    try:
        raw = parse_config_text(path.read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    base = path.resolve().parent

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base / q

    known = {
        "net", "trips", "out", "flows", "truth", "classes", "theta",
        "t0_multiplier", "demand_share", "epsilon_rg", "max_iters",
        "degree_n", "kernel_c", "gamma", "slack_norm", "qp_tol_primal",
        "qp_tol_dual", "qp_max_iters", "sweep_n", "sweep_c", "sweep_gamma",
    }
    unknown = set(raw) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for req in ("net", "trips"):
        if req not in raw:
            raise UsageError(f"config is missing required key {req!r}")

    if any(k in raw for k in ("theta", "t0_multiplier", "demand_share")):
        for k in ("theta", "t0_multiplier", "demand_share"):
            if k not in raw:
                raise UsageError(
                    "theta, t0_multiplier and demand_share must be given together"
                )
        classes = ClassConfig(
            _floats(raw["theta"]),
            _floats(raw["t0_multiplier"]),
            _floats(raw["demand_share"]),
        )
    else:
        preset = raw.get("classes", "cars_trucks")
        if preset not in CLASS_PRESETS:
            raise UsageError(
                f"unknown class preset {preset!r}; "
                f"options: {sorted(CLASS_PRESETS)}"
            )
        classes = CLASS_PRESETS[preset]()

    truth = raw.get("truth", "bpr015")
    if truth != "none" and truth not in GROUND_TRUTHS:
        raise UsageError(
            f"unknown ground truth {truth!r}; "
            f"options: {sorted(GROUND_TRUTHS)} or 'none'"
        )
    try:
        return ExperimentConfig(
            net=resolve(raw["net"]),
            trips=resolve(raw["trips"]),
            out=resolve(raw["out"]) if "out" in raw else Path("out"),
            flows=resolve(raw["flows"]) if "flows" in raw else None,
            truth=truth,
            classes=classes,
            epsilon_rg=float(raw.get("epsilon_rg", 1e-6)),
            max_iters=int(raw.get("max_iters", 1000)),
            degree_n=int(raw.get("degree_n", 5)),
            kernel_c=float(raw.get("kernel_c", 1.0)),
            gamma=float(raw.get("gamma", 0.1)),
            slack_norm=raw.get("slack_norm", "l1"),
            qp_tol_primal=float(raw.get("qp_tol_primal", 1e-4)),
            qp_tol_dual=float(raw.get("qp_tol_dual", 1e-4)),
            qp_max_iters=int(raw.get("qp_max_iters", 400_000)),
            sweep_n=_ints(raw.get("sweep_n", "3,4,5,6")),
            sweep_c=_floats(raw.get("sweep_c", "0.5,1.0,1.5")),
            sweep_gamma=_floats(raw.get("sweep_gamma", "0.01,0.1,1.0,10.0,100.0")),
        )
    except ValueError as exc:
        raise UsageError(f"bad config value: {exc}") from exc


def _load_problem(cfg: ExperimentConfig):
    """Parse network and trips, build the class-replicated model."""
    for p in (cfg.net, cfg.trips):
        if not p.exists():
            raise FileNotFoundError(f"input file not found: {p}")
    with open(cfg.net) as fh:
        spec = parse_network(fh)
    with open(cfg.trips) as fh:
        table = parse_trips(fh)
    net = build_multiclass(spec, cfg.classes)
    demands = split_demand(table, cfg.classes)
    return net, demands


def _truth_model(cfg: ExperimentConfig, net: MulticlassNetwork) -> CostModel:
    if cfg.truth == "none":
        raise UsageError(
            "no observed flows given and truth = none: nothing to simulate"
        )
    return CostModel(net, GROUND_TRUTHS[cfg.truth])


def _observed_flows(cfg: ExperimentConfig, net: MulticlassNetwork, demands):
    """Observed flows from file when given, else a fresh forward solve."""
    if cfg.flows is not None:
        if not cfg.flows.exists():
            raise FileNotFoundError(f"input file not found: {cfg.flows}")
        with open(cfg.flows) as fh:
            return read_flows_csv(fh, n_links=net.n_links, n_classes=net.n_classes)
    model = _truth_model(cfg, net)
    flows, _ = msa_solve(net, demands, model, cfg.msa_config(), keep_origin_flows=False)
    return flows


def _write_kv(fh: IO[str], pairs: Sequence[tuple[str, object]]) -> None:
    for key, value in pairs:
        fh.write(f"{key} = {value!r}\n" if isinstance(value, float) else f"{key} = {value}\n")


def cmd_assign(cfg: ExperimentConfig) -> int:
    net, demands = _load_problem(cfg)
    model = _truth_model(cfg, net)
    flows, stats = msa_solve(net, demands, model, cfg.msa_config(), keep_origin_flows=True)
    rel_eps = relative_vi_epsilon(flows, net, demands, model)
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / "flows.csv", "w") as fh:
        write_flows_csv(flows, fh)
    with open(cfg.out / "assign_stats.txt", "w") as fh:
        _write_kv(
            fh,
            [
                ("iterations", stats.iterations),
                ("final_rg", stats.final_rg),
                ("total_cost", stats.total_cost),
                ("vi_epsilon", stats.vi_epsilon),
                ("vi_epsilon_rel", rel_eps),
                ("feasibility_residual", stats.feasibility),
            ],
        )
    with open(cfg.out / "rg_trace.csv", "w") as fh:
        fh.write("iteration,rg\n")
        for it, rg in enumerate(stats.rg_trace, start=1):
            fh.write(f"{it},{rg!r}\n")
    print(
        f"assign: {stats.iterations} iterations, final rg {stats.final_rg:.3e}, "
        f"relative vi gap {rel_eps:.3e} -> {cfg.out}"
    )
    return EXIT_OK


def _write_result(path: Path, cfg: EstimationConfig, result, z_max: float,
                  sup_err: float | None) -> None:
    with open(path, "w") as fh:
        fh.write("key,value\n")
        fh.write("status,optimal\n")
        fh.write(f"degree_n,{cfg.degree_n}\n")
        fh.write(f"kernel_c,{cfg.kernel_c!r}\n")
        fh.write(f"gamma,{cfg.gamma!r}\n")
        fh.write(f"slack_norm,{cfg.slack_norm}\n")
        fh.write(f"slack_total,{float(np.sum(result.epsilons))!r}\n")
        fh.write(f"qp_iterations,{result.qp.iterations}\n")
        fh.write(f"qp_primal_residual,{result.qp.primal_residual!r}\n")
        fh.write(f"qp_dual_residual,{result.qp.dual_residual!r}\n")
        fh.write(f"z_max,{z_max!r}\n")
        if sup_err is not None:
            fh.write(f"sup_rel_error,{sup_err!r}\n")
        for j, b in enumerate(result.poly.beta):
            fh.write(f"beta_{j},{b!r}\n")


def _write_curve(path: Path, poly, truth, z_max: float) -> None:
    """Curve CSV on [0, z_max]: columns z, f_true, f_hat (true may be nan)."""
    hat = sample_curve(poly, z_max, 101)
    true_vals = sample_curve(truth, z_max, 101)[:, 1] if truth is not None else np.full(101, np.nan)
    with open(path, "w") as fh:
        fh.write("z,f_true,f_hat\n")
        for (z, fh_val), ft in zip(hat, true_vals):
            fh.write(f"{float(z)!r},{float(ft)!r},{float(fh_val)!r}\n")


def sup_relative_error(poly, truth, z_max: float, grid_points: int = 101) -> float:
    """max |f_hat - f_true| / f_true over an evenly spaced grid."""
    z = np.linspace(0.0, z_max, grid_points)
    ft = np.asarray(truth(z), dtype=float)
    fh_vals = np.asarray(poly(z), dtype=float)
    return float(np.max(np.abs(fh_vals - ft) / ft))


def cmd_estimate(cfg: ExperimentConfig) -> int:
    net, demands = _load_problem(cfg)
    flows = _observed_flows(cfg, net, demands)
    obs = Observation(net, demands, flows)
    est_cfg = cfg.estimation_config()
    result = estimate(
        [obs],
        est_cfg,
        tol_primal=cfg.qp_tol_primal,
        tol_dual=cfg.qp_tol_dual,
        max_iters=cfg.qp_max_iters,
    )
    z_max = float(np.max(congestion_ratios(flows, net), initial=0.0))
    truth = GROUND_TRUTHS[cfg.truth] if cfg.truth != "none" else None
    sup_err = (
        sup_relative_error(result.poly, truth, 0.9 * z_max)
        if truth is not None and z_max > 0
        else None
    )
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_result(cfg.out / "result.csv", est_cfg, result, z_max, sup_err)
    _write_curve(cfg.out / "curve.csv", result.poly, truth, max(z_max, 1e-6))
    msg = f"estimate: beta = {[round(b, 6) for b in result.poly.beta]}"
    if sup_err is not None:
        msg += f", sup relative error {sup_err:.4f} on [0, {0.9 * z_max:.3f}]"
    print(msg + f" -> {cfg.out}")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig) -> int:
    net, demands = _load_problem(cfg)
    flows = _observed_flows(cfg, net, demands)
    obs = Observation(net, demands, flows)
    truth = GROUND_TRUTHS[cfg.truth] if cfg.truth != "none" else None
    z_max = float(np.max(congestion_ratios(flows, net), initial=0.0))
    cfg.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for n in cfg.sweep_n:
        # constraints depend only on n; reuse the assembly across (c, gamma)
        base_cfg = EstimationConfig(n, 1.0, 1.0, cfg.slack_norm)
        problem, varmap = assemble_reduced_qp([obs], base_cfg)
        for c in cfg.sweep_c:
            for gamma in cfg.sweep_gamma:
                point = EstimationConfig(n, c, gamma, cfg.slack_norm)
                name = f"curve_n{n}_c{c}_g{gamma}.csv"
                try:
                    result = solve_assembled(
                        reweighted(problem, varmap, point),
                        varmap,
                        point,
                        tol_primal=cfg.qp_tol_primal,
                        tol_dual=cfg.qp_tol_dual,
                        max_iters=cfg.qp_max_iters,
                        observations=[obs],
                    )
                except EstimationError as exc:
                    rows.append((name, n, c, gamma, exc.solution.status, "nan", "nan"))
                    print(f"sweep: n={n} c={c} gamma={gamma}: {exc}")
                    continue
                sup_err = (
                    sup_relative_error(result.poly, truth, 0.9 * z_max)
                    if truth is not None and z_max > 0
                    else None
                )
                _write_curve(cfg.out / name, result.poly, truth, max(z_max, 1e-6))
                rows.append(
                    (
                        name, n, c, gamma, "optimal",
                        repr(float(np.sum(result.epsilons))),
                        repr(sup_err) if sup_err is not None else "nan",
                    )
                )
                msg = f"sweep: n={n} c={c} gamma={gamma}"
                if sup_err is not None:
                    msg += f" sup relative error {sup_err:.4f}"
                print(msg)
    with open(cfg.out / "manifest.csv", "w") as fh:
        fh.write("file,n,c,gamma,status,slack_total,sup_rel_error\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    print(f"sweep: wrote {len(rows)} grid points -> {cfg.out / 'manifest.csv'}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage problems; this interface reserves 2
    # for data errors, so route usage failures through UsageError instead
    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="tapcost",
        description="Multi-class equilibrium assignment and latency recovery.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
        ("assign", "solve for an equilibrium and write link flows"),
        ("estimate", "recover the congestion function from flows"),
        ("sweep", "estimate over grids of degree, kernel width, weight"),
    ):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", required=True, type=Path, help="experiment config file")
        p.add_argument("--net", type=Path, help="override network file")
        p.add_argument("--trips", type=Path, help="override trips file")
        p.add_argument("--out", type=Path, help="override output directory")
        if name in ("estimate", "sweep"):
            p.add_argument("--flows", type=Path, help="observed flows CSV")
        if name == "estimate":
            p.add_argument("--n", type=int, help="polynomial degree")
            p.add_argument("--c", type=float, help="kernel width")
            p.add_argument("--gamma", type=float, help="regularizer weight")
    return parser


def _apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    updates = {}
    for flag, key in (("net", "net"), ("trips", "trips"), ("out", "out"),
                      ("flows", "flows")):
        value = getattr(args, flag, None)
        if value is not None:
            updates[key] = value
    for flag, key in (("n", "degree_n"), ("c", "kernel_c"), ("gamma", "gamma")):
        value = getattr(args, flag, None)
        if value is not None:
            updates[key] = value
    return replace(cfg, **updates) if updates else cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _apply_overrides(load_config(args.config), args)
        # fail fast on bad estimator parameters before touching data
        if args.command in ("estimate", "sweep"):
            cfg.estimation_config()
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "assign":
            return cmd_assign(cfg)
        if args.command == "estimate":
            return cmd_estimate(cfg)
        return cmd_sweep(cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, TntpFormatError, UnreachableDemandError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EstimationError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
