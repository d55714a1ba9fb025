"""Multi-class traffic equilibrium and congestion-function recovery."""

from .cost import (
    GROUND_TRUTHS,
    CostModel,
    PolynomialCost,
    congestion_ratio,
    congestion_ratios,
    eval_latency,
    eval_poly,
    sample_curve,
)
from .estimate import (
    EstimationConfig,
    EstimationError,
    EstimationResult,
    Observation,
    VariableMap,
    assemble_qp,
    assemble_reduced_qp,
    estimate,
    monotonicity_chain,
    regularizer_weights,
    reweighted,
    solve_assembled,
)
from .msa import (
    MsaConfig,
    MsaStats,
    UnreachableDemandError,
    all_or_nothing,
    msa_solve,
    relative_vi_epsilon,
    vi_epsilon,
)
from .network import (
    ClassConfig,
    DemandSet,
    FlowState,
    MulticlassNetwork,
    ShortestPathTree,
    build_multiclass,
    feasibility_residual,
    shortest_path_tree,
    split_demand,
)
from .qp import QpProblem, QpSolution, dump_qp, kkt_residuals, load_qp, solve_qp
from .tntp import (
    DemandTable,
    LinkSpec,
    NetworkSpec,
    TntpFormatError,
    parse_network,
    parse_trips,
    read_flows_csv,
    write_flows_csv,
    write_network,
    write_trips,
)

__version__ = "0.1.0"
