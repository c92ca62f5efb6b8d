"""One-step local refinement of an auxiliary estimate on a log-EL ratio surface.

The refinement treats the averaged log-likelihood ratio r(theta, anchor) as
locally linear-quadratic in the rescaled step tau (theta = anchor +
delta * tau).  Finite differences of the ratio at lattice offsets recover
the curvature matrix and score vector of that local surrogate; the update
is the surrogate argmax, anchor + delta * curvature^{-1} score.  Repeating
the update yields the iteration traces reported by the CLI.

All builders work on any object exposing

    ratio(theta1, theta2) -> float
    lambda_norm(theta) -> float
    directional_grad(theta, direction) -> float

which ELSurface implements for real moment models and QuadraticSurface /
ConstantSurface implement exactly for validation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics
from .elcore import (
    ELSurface,
    InfeasibleEvaluation,
    DegenerateMoments,
    MomentModel,
    Sample,
    SolverOptions,
)
from .numerics import NoSignChange, SingularAfterRidge


class IllConditionedDirections(Exception):
    """Direction matrix too close to singular to solve for the score."""


class NoJacobian(Exception):
    """Operation requires a model with an analytic Jacobian."""


def default_delta(n: int) -> float:
    return float(n) ** -0.5


@dataclass(frozen=True)
class PowerDelta:
    """Picklable power rule n -> n**exponent for the localization scale."""

    exponent: float = -0.5

    def __call__(self, n: int) -> float:
        return float(n) ** self.exponent


@dataclass(frozen=True)
class LocalConfig:
    """Knobs for the local refinement loop."""

    delta_rule: Callable[[int], float] = default_delta
    direction_step: float = 1.0
    sparsify_c: float = 1.0
    tau_tol: float = 1e-6
    max_iter: int = 50
    hessian_mode: str = "definition"  # or "directional"
    # The surrogate is fitted from ratio values at steps of one and two
    # direction units; requesting a much larger step extrapolates outside
    # the window where the linear-quadratic representation is trusted, so
    # steps are rescaled to this infinity-norm bound.
    tau_max: float = 4.0
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tau_max <= 0:
            raise ValueError("tau_max must be positive")
        if self.hessian_mode not in ("definition", "directional"):
            raise ValueError("hessian_mode must be 'definition' or 'directional'")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    theta: np.ndarray
    lambda_norm: float
    tau: np.ndarray
    tau_norm: float
    estimate: np.ndarray


@dataclass
class LocalFit:
    theta_star: np.ndarray
    curvature: np.ndarray
    score: np.ndarray
    tau: np.ndarray
    estimate: np.ndarray
    trace: list[TraceRow]
    ridge_used: float
    converged: bool
    delta: float


def sparsify(theta_star, delta_n: float, c: float = 1.0) -> np.ndarray:
    """Snap to the nearest point of the lattice {c * delta_n * z, z integer}."""
    if c <= 0:
        raise ValueError("c must be positive")
    theta = np.atleast_1d(np.asarray(theta_star, dtype=float))
    mesh = c * delta_n
    return mesh * np.round(theta / mesh)


def coordinate_directions(dim: int, step: float = 1.0) -> np.ndarray:
    return step * np.eye(dim)


def curvature_matrix(surface, theta_star, delta_n: float,
                     directions: np.ndarray) -> np.ndarray:
    """Second-difference curvature of the local surrogate, indexed by direction.

    Entry (i, j) is -{r(a + delta(u_i + u_j), a) - r(a + delta u_i, a)
    - r(a + delta u_j, a)} for anchor a; exact for quadratic surfaces.
    Symmetrized on return.
    """
    theta = np.atleast_1d(np.asarray(theta_star, dtype=float))
    dirs = np.atleast_2d(np.asarray(directions, dtype=float))
    d = dirs.shape[0]
    single = {}
    for i in range(d):
        single[i] = surface.ratio(theta + delta_n * dirs[i], theta)
    out = np.empty((d, d))
    for i in range(d):
        for j in range(i, d):
            both = surface.ratio(theta + delta_n * (dirs[i] + dirs[j]), theta)
            out[i, j] = out[j, i] = -(both - single[i] - single[j])
    return 0.5 * (out + out.T)


def score_vector(surface, theta_star, delta_n: float, directions: np.ndarray,
                 curvature: np.ndarray) -> np.ndarray:
    """Linear term of the local surrogate: solves u_j' s = r_j + K_jj / 2."""
    theta = np.atleast_1d(np.asarray(theta_star, dtype=float))
    dirs = np.atleast_2d(np.asarray(directions, dtype=float))
    d = dirs.shape[0]
    rhs = np.empty(d)
    for j in range(d):
        rhs[j] = surface.ratio(theta + delta_n * dirs[j], theta) + 0.5 * curvature[j, j]
    if np.linalg.cond(dirs) > 1e8:
        raise IllConditionedDirections("direction matrix condition number above 1e8")
    return np.linalg.solve(dirs, rhs)


def one_step(theta_star, curvature, score, delta_n: float):
    """Surrogate argmax: estimate = theta_star + delta_n * curvature^{-1} score.

    Returns (estimate, tau, ridge_used); tau maximizes
    t's - t'Kt/2 so the update is the peak of the local quadratic model.
    """
    theta = np.atleast_1d(np.asarray(theta_star, dtype=float))
    curvature = np.atleast_2d(np.asarray(curvature, dtype=float))
    score = np.atleast_1d(np.asarray(score, dtype=float))
    try:
        tau = numerics.cholesky_solve(curvature, score)
        ridge = 0.0
    except numerics.NotPositiveDefinite:
        inv = numerics.invert_spd_ridge(curvature)
        tau = inv.inverse @ score
        ridge = inv.ridge
    return theta + delta_n * tau, tau, ridge


def iterate(surface, theta_aux, config: LocalConfig = LocalConfig(),
            n: int | None = None, delta: float | None = None,
            bounds=None) -> LocalFit:
    """Run the refinement loop from a sparsified auxiliary estimate.

    Either delta or the sample size n (fed to config.delta_rule) must be
    given.  Stops when the step norm falls below config.tau_tol or after
    config.max_iter iterations; inner failures end the loop with the best
    fit so far and converged=False.  bounds, when given, is the experiment
    parameter box; iterates are clipped into it so the local path searches
    the same region as the global estimators.
    """
    if delta is None:
        if n is None:
            raise ValueError("pass delta or n")
        delta = config.delta_rule(n)
    if bounds is not None:
        box_lo = np.array([b[0] for b in bounds], dtype=float)
        box_hi = np.array([b[1] for b in bounds], dtype=float)
    theta = sparsify(theta_aux, delta, config.sparsify_c)
    if bounds is not None:
        theta = np.minimum(np.maximum(theta, box_lo), box_hi)
    theta0 = theta.copy()
    d = theta.size
    u = config.direction_step
    dirs = coordinate_directions(d, u)
    rows: list[TraceRow] = []
    curvature = np.eye(d)
    score = np.zeros(d)
    tau = np.zeros(d)
    ridge_max = 0.0
    converged = False
    best_value = -np.inf
    best_theta = theta.copy()

    for t in range(1, config.max_iter + 1):
        try:
            value = surface.ratio(theta, theta0)
            if value > best_value:
                best_value, best_theta = value, theta.copy()
            lam_norm = surface.lambda_norm(theta)
            # Direction-indexed entries relate to the coordinate-basis
            # curvature by G = u^2 K for directions u * e_i.
            if config.hessian_mode == "directional":
                curvature = hessian_directional(surface, theta, delta)
            else:
                curvature = curvature_matrix(surface, theta, delta, dirs) / (u * u)
            score = score_vector(surface, theta, delta, dirs, (u * u) * curvature)
            estimate, tau, ridge = one_step(theta, curvature, score, delta)
            tau_norm = float(np.abs(tau).max())
            # Trust the surrogate only within a few multiples of the
            # sampled window (steps of u and 2u per coordinate).
            tau_cap = config.tau_max * u
            if tau_norm > tau_cap:
                tau = tau * (tau_cap / tau_norm)
                tau_norm = tau_cap
                estimate = theta + delta * tau
            if bounds is not None:
                clipped = np.minimum(np.maximum(estimate, box_lo), box_hi)
                if not np.array_equal(clipped, estimate):
                    estimate = clipped
                    tau = (estimate - theta) / delta
                    tau_norm = float(np.abs(tau).max())
        except (InfeasibleEvaluation, DegenerateMoments, SingularAfterRidge,
                IllConditionedDirections):
            theta = best_theta
            if not rows:
                rows.append(TraceRow(t, theta.copy(), np.nan, np.zeros(d),
                                     np.nan, theta.copy()))
            break
        ridge_max = max(ridge_max, ridge)
        rows.append(TraceRow(t, theta.copy(), lam_norm, tau.copy(), tau_norm,
                             estimate.copy()))
        theta = estimate
        if tau_norm <= config.tau_tol:
            converged = True
            break

    if not converged:
        # A stalled or wandering loop reports the best point it visited.
        theta = best_theta

    return LocalFit(
        theta_star=theta0,
        curvature=curvature,
        score=score,
        tau=tau,
        estimate=theta,
        trace=rows,
        ridge_used=ridge_max,
        converged=converged,
        delta=delta,
    )


def fit_local(model: MomentModel, sample: Sample, theta_aux,
              config: LocalConfig = LocalConfig(), bounds=None) -> LocalFit:
    """Convenience wrapper building the EL surface for (model, sample)."""
    surface = ELSurface(model, sample, config.solver)
    return iterate(surface, theta_aux, config, n=sample.n, bounds=bounds)


def directional_grad_logp(surface, theta, direction, h0: float | None = None,
                          levels: int = 5) -> float:
    """Directional derivative of the averaged log implied probability."""
    return surface.directional_grad(theta, direction, h0=h0, levels=levels)


def hessian_directional(surface, theta_star, delta_n: float,
                        theta_tilde=None) -> np.ndarray:
    """Curvature from differences of directional derivatives at two points.

    Column j differences the coordinate-j directional derivative between
    theta_star and a shifted point (theta_tilde when given, else
    theta_star + delta_n * e_j); scaled by delta_n^2 it matches
    curvature_matrix on smooth surfaces and exactly on quadratics.
    """
    theta = np.atleast_1d(np.asarray(theta_star, dtype=float))
    d = theta.size
    if theta_tilde is None:
        steps = delta_n * np.ones(d)
    else:
        steps = np.atleast_1d(np.asarray(theta_tilde, dtype=float)) - theta
        if np.any(steps == 0):
            raise ValueError("theta_tilde must differ from theta_star in every coordinate")
    base = np.array([surface.directional_grad(theta, e) for e in np.eye(d)])
    out = np.empty((d, d))
    for j in range(d):
        shifted = theta.copy()
        shifted[j] += steps[j]
        for i, e in enumerate(np.eye(d)):
            moved = surface.directional_grad(shifted, e)
            out[i, j] = -(delta_n ** 2) * (moved - base[i]) / steps[j]
    return 0.5 * (out + out.T)


@dataclass(frozen=True)
class DirectionChoice:
    theta_tilde: np.ndarray
    used_fallback: bool


def choose_direction_bisection(model: MomentModel, sample: Sample, theta_star,
                               bracket, delta_n: float,
                               opts: SolverOptions = SolverOptions()) -> DirectionChoice:
    """Pick the reflected point where lam(a)'[sum m(a) + sum m(t)] crosses zero.

    Searched per coordinate by bisection on the given (lo, hi) bracket; a
    missing sign change or a degenerate lam(a) = 0 falls back to
    theta_star + delta_n along that coordinate and flags the result.
    """
    from .elcore import solve_lambda, _moment_matrix

    theta = np.atleast_1d(np.asarray(theta_star, dtype=float))
    d = theta.size
    lo, hi = float(bracket[0]), float(bracket[1])
    sol = solve_lambda(model, sample, theta, opts)
    lam = sol.lam
    base_total = _moment_matrix(model, sample, theta).sum(axis=0)
    base_value = float(lam @ base_total)

    out = theta.copy()
    fallback = False
    if np.linalg.norm(lam) == 0.0:
        return DirectionChoice(theta + delta_n * np.eye(d)[0], True)

    for j in range(d):
        def g(x: float) -> float:
            point = theta.copy()
            point[j] = x
            total = _moment_matrix(model, sample, point).sum(axis=0)
            return base_value + float(lam @ total)

        try:
            out[j] = numerics.bisect_root(g, lo, hi, tol=1e-13)
        except NoSignChange:
            out[j] = theta[j] + delta_n
            fallback = True
    return DirectionChoice(out, fallback)


def weighted_score(surface, theta_star, delta_n: float, direction) -> float:
    """Weighted-average first-difference score along one direction.

    Returns delta_n^{-1} s via (3/2)[f(du) - f(0)]/du - (1/2)[f(2du) -
    f(du)]/du for f(t) = ratio(anchor + t * unit, anchor) and du =
    delta_n * |direction|; exact (equal to the slope) when f is quadratic.
    """
    theta = np.atleast_1d(np.asarray(theta_star, dtype=float))
    direction = np.atleast_1d(np.asarray(direction, dtype=float))
    du = delta_n * float(np.linalg.norm(direction))
    unit = direction / float(np.linalg.norm(direction))
    f1 = surface.ratio(theta + du * unit, theta)
    f2 = surface.ratio(theta + 2.0 * du * unit, theta)
    return 1.5 * f1 / du - 0.5 * (f2 - f1) / du


def information_relative_error(model: MomentModel, sample: Sample, theta0,
                               curvature: np.ndarray, delta_n: float) -> float:
    """Relative gap between the scaled curvature and the plug-in information.

    The plug-in is Jhat' Vhat^{-1} Jhat with Jhat the mean analytic
    Jacobian and Vhat the second-moment matrix of the moments.  With unit
    coordinate directions the local curvature divided by delta_n^2
    estimates exactly this matrix (no extra constant), which the
    exact-quadratic tests pin down.
    """
    if model.jacobian is None:
        raise NoJacobian("model lacks an analytic Jacobian")
    theta = np.atleast_1d(np.asarray(theta0, dtype=float))
    obs = sample.observations
    jac = np.asarray(model.jacobian(obs, theta), dtype=float)
    jac = jac.reshape(sample.n, model.moment_dim, model.param_dim)
    jhat = jac.mean(axis=0)
    m = np.asarray(model.evaluate(obs, theta), dtype=float).reshape(sample.n, -1)
    vhat = m.T @ m / sample.n
    a2 = jhat.T @ np.linalg.solve(vhat, jhat)
    scaled = np.atleast_2d(curvature) / delta_n**2
    return float(np.linalg.norm(scaled - a2) / np.linalg.norm(a2))
