"""Perturbed value-function interior-point method for pessimistic bilevel problems."""
from pvfim.analysis import (
    ConstantsReport,
    StationarityReport,
    Tolerances,
    compute_constants,
    fd_gradient_check,
    stationarity_report,
)
from pvfim.barrier import (
    BarrierEval,
    BarrierParams,
    GradientEstimate,
    LowerApproxResult,
    approx_lower_solution,
    barrier_eval,
    example3_slab_projection,
    fJ_gradient,
    grad_estimate,
    in_restricted_set,
    restore_feasibility,
)
from pvfim.errors import (
    BarrierDomainError,
    ContractViolation,
    InvalidArgumentError,
    NumericalFailure,
    OracleError,
    PvfimError,
    ScheduleInvalid,
)
from pvfim.oracle import GridSpec, OracleResult, oracle_point, oracle_sweep, point_oracle
from pvfim.problem import (
    BilevelProblem,
    Box,
    LipschitzSpec,
    ValueBounds,
    example3_lipschitz,
    example3_problem,
    project_box,
)
from pvfim.solver import (
    FneCertificate,
    InnerConfig,
    OuterSchedule,
    ScheduleEntry,
    SolveTrace,
    TraceRow,
    reference_schedule,
    check_fne,
    custom_schedule,
    find_fne,
    pvfim,
    schedule_reference,
    schedule_geometric,
    geometric_schedule,
)

__version__ = "0.1.0"
