"""Scenario-lattice laboratory for mean-field reflected backward equations
driven by marked point processes.

The pipeline: describe a compensator model (mpp_model), expand it into an
exact scenario lattice, declare drivers/obstacles/terminal data (drivers),
solve backward (bsde_solver, reflected_solver), couple through the marginal
law by Picard iteration (meanfield), and cross-check everything against
slow exact oracles (oracle).
"""

from ._backend import backend_name
from .bsde_solver import (
    GapReport,
    LatticeSolution,
    apriori_gap_check,
    backward_step,
    conditional_expectation,
    exp_growth_check,
    g_expectation,
    solve_bsde,
    solve_lattice,
)
from .drivers import (
    DriverSpec,
    ObstacleSpec,
    TerminalSpec,
    affine_obstacle,
    array_terminal,
    constant_obstacle,
    constant_terminal,
    convexity_check,
    count_terminal,
    custom_driver,
    declared_lipschitz,
    discount_driver,
    envelope_check,
    eval_driver,
    j_lambda,
    jump_exp_driver,
    linear_driver,
    linear_mean_driver,
    lipschitz_check,
    mark_weighted_terminal,
    mean_driver,
    terminal_consistency,
    terminal_values,
    zero_driver,
)
from .errors import (
    ConfigError,
    GuardError,
    MfrbsdeError,
    ModelError,
    SolverError,
    ValidationError,
)
from .laws import EmpiricalLaw, dirac, node_law, wasserstein
from .meanfield import (
    IterationReport,
    MeanFieldParams,
    admissibility,
    contraction_constant,
    moment_diagnostics,
    picard_solve,
    split_horizon,
    theta_gap,
)
from .mpp_model import (
    CompensatorModel,
    MarkSpace,
    MarkedPointPattern,
    ScenarioLattice,
    build_lattice,
    compensated_integral,
    compensator_residual,
    lattice_compensated_expectation,
    lattice_from_text,
    lattice_to_text,
    make_model,
    patterns_from_text,
    patterns_to_text,
    poisson_model,
    simulate_patterns,
)
from .oracle import exact_meanfield_fixed_point, exact_tree_solve
from .reflected_solver import (
    ReflectedSolution,
    count_stopping_rules,
    flat_off_residual,
    snell_value_bruteforce,
    solve_reflected,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
