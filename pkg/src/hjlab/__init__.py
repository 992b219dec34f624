"""Verification lab for degenerate viscous Hamilton-Jacobi equations on the torus.

The package solves

    u_t + H(x, Du) = tr(A(x) D^2 u)        on T^d, d in {1, 2},

with convex H and degenerate (possibly vanishing) diffusion A >= 0, and
checks the discrete counterparts of the identities and estimates that
drive the large-time asymptotics of such equations: conservation of
energy along an adjoint density, the representation formula for the
rescaled time derivative, ergodic-constant perturbation rates, and decay
of the time derivative at the end of the rescaled window.

Modules
-------
grid      periodic tensor grids and stencil operators
problem   Hamiltonian / diffusion / coupling specifications and validators
forward   monotone implicit time stepping for the Cauchy problem
ergodic   cell-problem (ergodic constant) solvers and viscosity sweeps
adjoint   exact-transpose linearized steps and adjoint densities
analysis  energy traces, integral estimates, rates, convergence checks
cli       config-driven experiment runner
"""

from hjlab.grid import (
    PeriodicGrid,
    ScalarField,
    VectorField,
    MatrixField,
    make_grid,
    gradient,
    laplacian,
    contract_second_derivatives,
    integrate,
    argmax_node,
)
from hjlab.problem import (
    TrigPoly,
    HamiltonianSpec,
    QuadraticHamiltonian,
    DiffusionSpec,
    CouplingMatrix,
    ProblemSpec,
    ValidationReport,
    scalar_problem,
    diffusion_zero,
    diffusion_constant,
    diffusion_sin_squared,
    diffusion_rank_one_2d,
    validate_pair,
    validate_coupling,
    manufacture_ergodic,
)
from hjlab.forward import (
    Trajectory,
    SolveReport,
    SolveError,
    SolverOptions,
    solve_cauchy,
    solve_system_cauchy,
    time_derivative,
    piecewise_linear_profile,
    manufacture_grid_exact,
)
from hjlab.ergodic import (
    ErgodicOptions,
    ErgodicSolution,
    SweepTable,
    solve_ergodic,
    solve_system_ergodic,
    discounted_constant,
    viscosity_sweep,
)
from hjlab.adjoint import (
    AdjointError,
    LinearizedStep,
    LinearizedSequence,
    AdjointDensity,
    dirac_values,
    linearize,
    solve_adjoint,
    solve_system_adjoint,
)
from hjlab.analysis import (
    EnergyTrace,
    EstimateReport,
    RateFit,
    LongTimeDiagnostics,
    energy_trace,
    representation_check,
    key_estimates,
    coupling_estimate,
    rate_sweep,
    large_time_convergence,
    closeness_check,
    tolerance_study,
)
from hjlab.cli import (
    ConfigError,
    RunManifest,
    preset,
    run_experiment,
    validate_config,
    main,
)

__version__ = "0.1.0"
