"""Moment models and the empirical likelihood inner problem.

Given a moment function m(x, theta) in R^k and a sample X_1..X_n, the EL
weights maximize sum(log n p_i) subject to sum(p_i) = 1 and
sum(p_i m_i(theta)) = 0.  The weights have the closed form
p_i = 1 / (n (1 + lam' m_i)) where the multiplier lam maximizes the
strictly concave dual sum(log(1 + lam' m_i)) over the region where every
1 + lam' m_i >= 1/n.  This module solves that inner problem by damped
Newton and exposes the profile quantities consumed by the local-refinement
and estimator layers:

  log_el(theta)            total profile log-likelihood, sum(log n p_i) <= 0
  log_el_ratio(t1, t2)     per-observation average of log(p_i(t1)/p_i(t2))

ELSurface caches per-theta solves and provides the ratio and directional
derivative primitives the refinement loop evaluates many times per fit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import numerics
from .numerics import NotPositiveDefinite, romberg_derivative


class DegenerateMoments(Exception):
    """Second-moment matrix of m_i(theta) is numerically rank deficient."""


class InfeasibleLambda(Exception):
    """A multiplier violates min_i(1 + lam' m_i) >= 1/n."""


class InfeasibleEvaluation(Exception):
    """Inner solve failed at a specific parameter point."""

    def __init__(self, theta, message="inner solve failed"):
        self.theta = np.atleast_1d(np.asarray(theta, dtype=float))
        super().__init__(f"{message} at theta={self.theta}")


@dataclass(frozen=True)
class MomentModel:
    """Moment restriction m(x, theta) with optional analytic Jacobian.

    evaluate(observations, theta) maps an (n, w) record array and a (d,)
    parameter to the (n, k) moment matrix.  jacobian, when given, returns
    the (n, k, d) array of per-observation derivatives in theta.
    """

    param_dim: int
    moment_dim: int
    evaluate: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.moment_dim < self.param_dim:
            raise ValueError("need moment_dim >= param_dim")


@dataclass(frozen=True)
class Sample:
    """Fixed-width observation records, one row per observation."""

    observations: np.ndarray

    def __post_init__(self):
        obs = np.atleast_2d(np.asarray(self.observations, dtype=float))
        if not np.all(np.isfinite(obs)):
            raise ValueError("observations contain non-finite entries")
        object.__setattr__(self, "observations", obs)

    @property
    def n(self) -> int:
        return self.observations.shape[0]


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-10
    max_iter: int = 100
    record_path: bool = False


@dataclass
class LambdaSolution:
    lam: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    feasibility_margin: float
    objective_path: list[float] | None = None


@dataclass(frozen=True)
class ImpliedProbabilities:
    p: np.ndarray


def _moment_matrix(model: MomentModel, sample: Sample, theta) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    m = np.asarray(model.evaluate(sample.observations, theta), dtype=float)
    m = m.reshape(sample.n, model.moment_dim)
    if not np.all(np.isfinite(m)):
        raise InfeasibleEvaluation(theta, "non-finite moment values")
    return m


def solve_lambda_moments(m: np.ndarray, opts: SolverOptions = SolverOptions(),
                         warm_start: np.ndarray | None = None) -> LambdaSolution:
    """Maximize the concave dual over the closed region min(1 + lam'm) >= 1/n.

    Damped Newton: the full step is scaled by a fraction-to-boundary rule
    (new margin >= max(1/n, 0.01 * current margin)), then backtracked by
    halving until the dual objective does not decrease.
    """
    m = np.asarray(m, dtype=float)
    n, k = m.shape
    if n < k + 1:
        raise ValueError("need at least k + 1 observations")
    v = m.T @ m / n
    pivot_floor = 1e-14 * max(np.trace(v), np.finfo(float).tiny)
    try:
        # Pivot check doubles as the full-rank screen on (1/n) sum m m'.
        chol = np.linalg.cholesky(v)
    except np.linalg.LinAlgError:
        raise DegenerateMoments("second-moment matrix is not positive definite")
    if np.min(np.diag(chol)) ** 2 <= pivot_floor:
        raise DegenerateMoments("second-moment matrix pivot below tolerance")

    floor = 1.0 / n
    lam = np.zeros(k)
    if warm_start is not None:
        w0 = 1.0 + m @ warm_start
        if w0.min() > floor:
            lam = np.asarray(warm_start, dtype=float).copy()

    def _stationary(w, residual):
        # At an interior optimum sum(p) = 1 automatically; a vanishing
        # residual with sum(p) far from 1 is the signature of lam
        # diverging because zero lies outside the moment convex hull.
        # Requiring the identity at 1e-12 makes Newton polish one extra
        # (quadratically convergent) step beyond the residual tolerance.
        return residual <= opts.tol and abs(np.sum(1.0 / w) / n - 1.0) <= 1e-12

    w = 1.0 + m @ lam
    objective = float(np.sum(np.log(w)))
    path = [objective] if opts.record_path else None
    residual = float(np.abs((m / w[:, None]).mean(axis=0)).max())
    converged = _stationary(w, residual)
    iterations = 0

    while not converged and iterations < opts.max_iter:
        iterations += 1
        mw = m / w[:, None]
        grad = mw.mean(axis=0)
        hess = mw.T @ mw / n
        try:
            step = numerics.cholesky_solve(hess, grad)
        except NotPositiveDefinite:
            step = numerics.invert_spd_ridge(hess).inverse @ grad
        slope = m @ step
        margin = float(w.min())
        bound = max(floor, 0.01 * margin)
        shrinking = slope < 0
        t = 1.0
        if np.any(shrinking):
            t = min(1.0, float(np.min((bound - w[shrinking]) / slope[shrinking])))
        if t <= 0:
            break
        slack = 1e-12 * (1.0 + abs(objective))  # rounding room near the optimum
        while t > 1e-16:
            w_new = w + t * slope
            if w_new.min() >= bound:
                obj_new = float(np.sum(np.log(w_new)))
                if obj_new >= objective - slack:
                    break
            t *= 0.5
        else:
            break
        lam = lam + t * step
        w = w_new
        objective = obj_new
        if path is not None:
            path.append(objective)
        residual = float(np.abs((m / w[:, None]).mean(axis=0)).max())
        converged = _stationary(w, residual)
        norm = float(np.linalg.norm(lam))
        if not converged and norm > 1e6 and np.min(m @ (lam / norm)) > 0:
            break  # separating direction certifies zero outside the hull

    return LambdaSolution(
        lam=lam,
        residual_norm=residual,
        iterations=iterations,
        converged=converged,
        feasibility_margin=float(w.min()) - floor,
        objective_path=path,
    )


def solve_lambda(model: MomentModel, sample: Sample, theta,
                 opts: SolverOptions = SolverOptions()) -> LambdaSolution:
    return solve_lambda_moments(_moment_matrix(model, sample, theta), opts)


def implied_probs(moments: np.ndarray, lam: np.ndarray) -> ImpliedProbabilities:
    """p_i = 1 / (n (1 + lam' m_i)); requires the closed feasibility constraint."""
    m = np.atleast_2d(np.asarray(moments, dtype=float))
    n = m.shape[0]
    w = 1.0 + m @ np.atleast_1d(lam)
    if w.min() < 1.0 / n - 1e-12:
        raise InfeasibleLambda(f"min(1 + lam'm) = {w.min():.3e} below 1/n")
    return ImpliedProbabilities(1.0 / (n * w))


def log_weights(model: MomentModel, sample: Sample, theta,
                opts: SolverOptions = SolverOptions()):
    """Per-observation log(n p_i(theta)) plus the solved multiplier.

    Returns (logw, solution); logw is None when the solve did not converge,
    which happens when zero is outside the convex hull of the moments.
    """
    m = _moment_matrix(model, sample, theta)
    sol = solve_lambda_moments(m, opts)
    if not sol.converged:
        return None, sol
    logw = -np.log1p(m @ sol.lam)
    return logw, sol


def log_el(model: MomentModel, sample: Sample, theta,
           opts: SolverOptions = SolverOptions()) -> float:
    """Total profile log-EL, sum_i log(n p_i(theta)); -inf when infeasible."""
    logw, _ = log_weights(model, sample, theta, opts)
    if logw is None:
        return -np.inf
    return float(np.sum(logw))


def log_el_ratio(model: MomentModel, sample: Sample, theta1, theta2,
                 opts: SolverOptions = SolverOptions()) -> float:
    """Average log(p_i(theta1)/p_i(theta2)), differenced per observation."""
    lw1, _ = log_weights(model, sample, theta1, opts)
    if lw1 is None:
        raise InfeasibleEvaluation(theta1)
    lw2, _ = log_weights(model, sample, theta2, opts)
    if lw2 is None:
        raise InfeasibleEvaluation(theta2)
    return float(np.mean(lw1 - lw2))


def moment_residual(model: MomentModel, sample: Sample, theta,
                    probs: ImpliedProbabilities) -> np.ndarray:
    """Diagnostic sum_i p_i m_i(theta); ~0 at a converged multiplier."""
    m = _moment_matrix(model, sample, theta)
    return m.T @ probs.p


class ELSurface:
    """Cached profile log-EL ratio surface over theta for one (model, sample).

    ratio(t1, t2) is the averaged per-observation log ratio; directional
    derivatives chain through the multiplier: d/dt mean log(n p_i) =
    -sum_i p_i d/dt[lam(theta_t)' m_i(theta_t)], with the inner derivative
    taken by Richardson-extrapolated central differences because lam has no
    closed form.
    """

    def __init__(self, model: MomentModel, sample: Sample,
                 opts: SolverOptions = SolverOptions()):
        self.model = model
        self.sample = sample
        self.opts = opts
        self._cache: dict[bytes, tuple] = {}
        self._warm: np.ndarray | None = None

    def _solve(self, theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        key = theta.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        m = _moment_matrix(self.model, self.sample, theta)
        sol = solve_lambda_moments(m, self.opts, warm_start=self._warm)
        logw = -np.log1p(m @ sol.lam) if sol.converged else None
        entry = (logw, sol, m)
        self._cache[key] = entry
        if sol.converged:
            self._warm = sol.lam
        return entry

    def solution(self, theta) -> LambdaSolution:
        return self._solve(theta)[1]

    def lambda_norm(self, theta) -> float:
        return float(np.linalg.norm(self.solution(theta).lam))

    def loglik(self, theta) -> float:
        logw, _, _ = self._solve(theta)
        if logw is None:
            return -np.inf
        return float(np.sum(logw))

    def ratio(self, theta1, theta2) -> float:
        lw1, _, _ = self._solve(theta1)
        if lw1 is None:
            raise InfeasibleEvaluation(theta1)
        lw2, _, _ = self._solve(theta2)
        if lw2 is None:
            raise InfeasibleEvaluation(theta2)
        return float(np.mean(lw1 - lw2))

    def directional_grad(self, theta, direction, h0: float | None = None,
                         levels: int = 5) -> float:
        """Directional derivative of the averaged log implied probability."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        direction = np.atleast_1d(np.asarray(direction, dtype=float))
        logw, sol, m0 = self._solve(theta)
        if logw is None:
            raise InfeasibleEvaluation(theta)
        n = m0.shape[0]
        p = 1.0 / (n * (1.0 + m0 @ sol.lam))

        def inner(t: float) -> np.ndarray:
            point = theta + t * direction
            lw, s, m = self._solve(point)
            if lw is None:
                raise InfeasibleEvaluation(point)
            return m @ s.lam

        if h0 is None:
            h0 = max(1e-4, 1e-4 * float(np.linalg.norm(theta)))
        deriv, _ = romberg_derivative(inner, 0.0, h0=h0, levels=levels)
        return float(-(p * deriv).sum())


class ConstantSurface:
    """Flat ratio surface; every log-likelihood difference is zero."""

    def ratio(self, theta1, theta2) -> float:
        return 0.0

    def lambda_norm(self, theta) -> float:
        return 0.0

    def directional_grad(self, theta, direction, h0=None, levels=5) -> float:
        return 0.0


class QuadraticSurface:
    """Exact linear-quadratic log-likelihood surface for validation.

    loglik(theta) = grad'(theta - center) - 0.5 (theta - center)' hess
    (theta - center); the ratio and directional derivative follow exactly,
    so refinement built on finite differences must recover grad and hess to
    rounding.
    """

    def __init__(self, center, grad, hess):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.grad = np.atleast_1d(np.asarray(grad, dtype=float))
        self.hess = np.atleast_2d(np.asarray(hess, dtype=float))

    def value(self, theta) -> float:
        dv = np.atleast_1d(np.asarray(theta, dtype=float)) - self.center
        return float(self.grad @ dv - 0.5 * dv @ self.hess @ dv)

    def argmax(self) -> np.ndarray:
        return self.center + np.linalg.solve(self.hess, self.grad)

    def ratio(self, theta1, theta2) -> float:
        return self.value(theta1) - self.value(theta2)

    def lambda_norm(self, theta) -> float:
        return 0.0

    def directional_grad(self, theta, direction, h0: float | None = None,
                         levels: int = 5) -> float:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        direction = np.atleast_1d(np.asarray(direction, dtype=float))
        if h0 is None:
            h0 = max(1e-4, 1e-4 * float(np.linalg.norm(theta)))
        deriv, _ = romberg_derivative(
            lambda t: self.value(theta + t * direction), 0.0, h0=h0, levels=levels
        )
        return float(deriv)
