"""Empirical likelihood estimation with a one-step local refinement.

Subpackages
-----------
numerics     dense kernels, Romberg differentiation, bisection, RNG streams
elcore       moment models, the dual multiplier solve, profile log-EL
local        sparse-grid snap, curvature/score builders, refinement loop
estimators   LS, IV, two-step GMM, global EL, simplex search
experiments  contaminated linear-IV and short-rate studies, MC runner
cli          run / trace / plotdata commands over config files
"""

from .elcore import (
    ELSurface,
    ImpliedProbabilities,
    LambdaSolution,
    MomentModel,
    QuadraticSurface,
    Sample,
    SolverOptions,
    implied_probs,
    log_el,
    log_el_ratio,
    moment_residual,
    solve_lambda,
)
from .estimators import (
    EstimateResult,
    el_global,
    gmm_two_step,
    instrumental_variables,
    least_squares,
    simplex_search,
)
from .local import (
    LocalConfig,
    LocalFit,
    curvature_matrix,
    fit_local,
    iterate,
    one_step,
    score_vector,
    sparsify,
)
from .numerics import (
    RngStream,
    bisect_root,
    cholesky_solve,
    invert_spd_ridge,
    romberg_derivative,
    sample_mixture,
    sample_normal,
)

__all__ = [name for name in dir() if not name.startswith("_")]
