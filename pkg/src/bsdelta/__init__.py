"""Backward stochastic difference equations on Bernoulli random-walk lattices.

Exact (no Monte Carlo) backward induction for equations

    Y_i = Y_{i+1} + f(t_{i+1}, Y_i, Z_{i+1}) dqv - Z_{i+1} dW_{i+1} - dM_{i+1}

on d-dimensional Bernoulli walks, for drivers that may grow subquadratically
or (with an explicit opt-in) quadratically in z, together with comparison and
stability analysis, explosion oracles, and convex-duality certificates.
"""

from .errors import (
    AdmissibilityError,
    AprioriBoundError,
    BsdeltaError,
    CertificateError,
    ConfigError,
    ContractError,
    DriverValidationError,
    EvaluationError,
    ExpressionError,
    NonSolvableError,
    SizeError,
    StepSizeError,
    StructuralError,
    SubgradientError,
)
from .lattice import (
    FULL_TREE,
    RECOMBINING,
    AdaptedField,
    Lattice,
    TimeGrid,
    build_lattice,
    cond_covariation,
    cond_expectation,
    continuous_interpolation,
    cross_orthogonality,
    increment_ratio,
)
from .driver import (
    ConjugateResult,
    DriverConstants,
    DriverSpec,
    PathInfo,
    builtin,
    conjugate,
    parse_driver,
    subgradient_in_z,
    truncate,
)
from .solver import (
    SolveConfig,
    SolveResult,
    TerminalSpec,
    apriori_bound,
    deterministic_solution,
    implicit_step,
    reconstruction_residual,
    solvability_margin,
    solve,
)
from .analysis import (
    ComparisonReport,
    ComparisonThresholds,
    ConvergenceTable,
    GronwallReport,
    StabilityReport,
    compare,
    comparison_thresholds,
    convergence_study,
    gronwall_bound,
    gronwall_extremal,
    quadratic_explosion,
    stability_gap,
    subquadratic_explosion,
    z_blowup,
)
from .duality import (
    DualCertificate,
    certify,
    constant_control,
    dual_value,
    duality_threshold,
    entropy_check,
    entropy_fields,
    maximizer,
    moment_bound,
    random_admissible_control,
    tilt_probabilities,
)

__version__ = "0.1.0"
