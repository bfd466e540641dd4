"""Reduced bilevel MPC: condensed formulations, move blocking and gap certificates for LTI plants."""
from .blocking import (
    BlockingMatrix,
    construct_from_p0,
    image_contains,
    leading_free,
    one_block,
    restriction_map,
    sample_initial_states,
)
from .certificates import (
    GapCertificate,
    ReducedProgram,
    blocked_gap_certificate,
    delta_bound,
    hmpc_gap_certificate,
    mfcq_probe,
    reduced_program,
)
from .config import ProblemConfig, load_config, loads_config, save_config, toy_config
from .errors import (
    AssumptionViolation,
    BmpcError,
    ConfigError,
    EnumerationCapExceeded,
    InfeasibleProblem,
    SolverFailure,
)
from .formulations import (
    TOY_X0,
    AffineStageConstraint,
    BilevelInstance,
    SolveReport,
    build_instance,
    hmpc_reference,
    reduced_map,
    solve_lower,
    solve_p0,
    solve_p0_cascade,
    solve_p1_oracle,
    solve_p2,
    solve_p3,
    theta_star_map,
    toy_instance,
    u_star_map,
    value_of,
)
from .lti import LtiPlant, PredictionModel, check_full_row_rank, prediction_model, steady_state_basis
from .qp import QpSolution, QpTolerances, QuadraticProgram, solve_nnls, solve_qp
from .simulate import ClosedLoopTrace, ControllerSpec, simulate, trace_metrics

__version__ = "0.1.0"
