"""Numerical laboratory for stochastic recursive optimal control.

Simulates controlled forward-backward stochastic systems, solves the
generalized value PDE by a monotone finite-difference scheme, integrates
the adjoint process triple, and verifies the first-order jet inclusions
between the value function and the adjoint ratio along optimal paths.
"""

from .adjoint import (
    AdjointTriple,
    MaxConditionReport,
    check_maximum_condition,
    hamiltonian,
    solve_adjoint,
    solve_pk,
    solve_q,
)
from .backward import (
    BackwardSolution,
    CostReport,
    RegressionError,
    backward_perturbation_probe,
    cost,
    solve_backward,
    value_envelope,
)
from .forward import (
    ConstantPolicy,
    ControlPolicy,
    FeedbackPolicy,
    NonFiniteStateError,
    PathBatch,
    PerturbationReport,
    TimeGrid,
    generate_increments,
    perturbation_moment_probe,
    simulate_forward,
)
from .hjb import (
    CFLError,
    ValueGrid,
    ViscosityCheckReport,
    cfl_max_dt,
    cfl_time_grid,
    generalized_hamiltonian,
    regularity_probe,
    solve_hjb_fd,
    viscosity_check,
)
from .jets import (
    ConnectionReport,
    JetEstimate,
    JetSet,
    estimate_jets_1d,
    superjet_membership,
    verify_connection,
)
from .oracles import (
    Example31Params,
    example31_adjoint,
    example31_constant_policy_y0,
    example31_hjb_residual,
    example31_jets,
    example31_value,
)
from .problem import (
    AssumptionProbeReport,
    ConfigError,
    ControlBoxError,
    DomainError,
    ExpressionSyntaxError,
    ProblemError,
    ProblemSpec,
    builtin_names,
    builtin_problem,
    builtin_start,
    eval_coefficients,
    parse_problem,
    probe_assumptions,
    project_control,
    render_problem,
)

__version__ = "0.1.0"
