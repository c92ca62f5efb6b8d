"""Auxiliary and benchmark estimators: LS, IV, two-step GMM, global EL.

The nonlinear criteria (GMM objective, profile log-EL) are optimized by a
derivative-free simplex search because the EL surface can be kinked or
flat under contaminated moments, which rules out gradient-based outer
loops.  The search maximizes, clips proposals into the feasible box, and
treats -inf objective values as an impassable barrier.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics
from .elcore import (
    ELSurface,
    LambdaSolution,
    MomentModel,
    Sample,
    SolverOptions,
)


class NotInvertible(Exception):
    """A normal-equation or instrument cross-product matrix is singular."""


class AllInfeasible(Exception):
    """Every evaluated parameter left zero outside the moment convex hull."""


@dataclass
class EstimateResult:
    theta_hat: np.ndarray
    method: str
    converged: bool
    objective_at_opt: float
    inner: Optional[LambdaSolution] = None


def least_squares(y: np.ndarray, x: np.ndarray) -> EstimateResult:
    """Ordinary least squares via the normal equations."""
    y = np.asarray(y, dtype=float).ravel()
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    xtx = x.T @ x
    theta = numerics.cholesky_solve(xtx, x.T @ y)
    resid = y - x @ theta
    return EstimateResult(theta, "ls", True, float(-(resid @ resid)))


def instrumental_variables(y: np.ndarray, x: np.ndarray, z: np.ndarray) -> EstimateResult:
    """Just-identified IV: solves z'(y - x theta) = 0."""
    y = np.asarray(y, dtype=float).ravel()
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if z.ndim == 1:
        z = z[:, None]
    ztx = z.T @ x
    if abs(np.linalg.det(ztx)) < 1e-300 or not np.all(np.isfinite(ztx)):
        raise NotInvertible("z'x is singular")
    try:
        theta = np.linalg.solve(ztx, z.T @ y)
    except np.linalg.LinAlgError as exc:
        raise NotInvertible(str(exc)) from exc
    resid = z.T @ (y - x @ theta)
    return EstimateResult(theta, "iv", True, float(-(resid @ resid)))


@dataclass(frozen=True)
class SimplexOptions:
    diameter_tol: float = 1e-8
    max_evals: int | None = None  # defaults to 500 * dim
    init_step: float | None = None


@dataclass
class SimplexResult:
    x: np.ndarray
    value: float
    evaluations: int
    converged: bool


def simplex_search(objective: Callable[[np.ndarray], float], start,
                   bounds: Sequence[tuple[float, float]] | None = None,
                   opts: SimplexOptions = SimplexOptions()) -> SimplexResult:
    """Nelder-Mead maximization with box clipping; returns the best point seen.

    Terminates when the simplex diameter drops below opts.diameter_tol or
    after 500 * dim evaluations (overridable).  -inf objective values are
    legal and act as a barrier: such points always lose comparisons, so
    accepted vertices stay in the finite region.
    """
    x0 = np.atleast_1d(np.asarray(start, dtype=float))
    d = x0.size
    if bounds is not None:
        lo = np.array([b[0] for b in bounds], dtype=float)
        hi = np.array([b[1] for b in bounds], dtype=float)
    else:
        lo = np.full(d, -np.inf)
        hi = np.full(d, np.inf)

    def clip(x: np.ndarray) -> np.ndarray:
        return np.minimum(np.maximum(x, lo), hi)

    max_evals = opts.max_evals if opts.max_evals is not None else 500 * d
    evals = 0
    best_x = clip(x0)
    best_f = -np.inf

    def f(x: np.ndarray) -> float:
        nonlocal evals, best_x, best_f
        evals += 1
        v = float(objective(x))
        if np.isnan(v):
            v = -np.inf
        if v > best_f:
            best_f, best_x = v, x.copy()
        return v

    x0 = clip(x0)
    verts = [x0]
    for i in range(d):
        if opts.init_step is not None:
            h = opts.init_step
        elif np.isfinite(lo[i]) and np.isfinite(hi[i]):
            h = 0.05 * (hi[i] - lo[i])
        else:
            h = 0.1 * max(1.0, abs(x0[i]))
        cand = x0.copy()
        cand[i] = cand[i] + h if cand[i] + h <= hi[i] else cand[i] - h
        verts.append(clip(cand))
    vals = [f(v) for v in verts]

    while evals < max_evals:
        order = np.argsort(vals)[::-1]
        verts = [verts[k] for k in order]
        vals = [vals[k] for k in order]
        diameter = max(
            float(np.abs(verts[0] - v).max()) for v in verts[1:]
        )
        if diameter <= opts.diameter_tol:
            return SimplexResult(best_x, best_f, evals, True)

        centroid = np.mean(verts[:-1], axis=0)
        worst = verts[-1]
        reflected = clip(centroid + (centroid - worst))
        fr = f(reflected)
        if fr > vals[0]:
            expanded = clip(centroid + 2.0 * (centroid - worst))
            fe = f(expanded)
            if fe > fr:
                verts[-1], vals[-1] = expanded, fe
            else:
                verts[-1], vals[-1] = reflected, fr
        elif fr > vals[-2]:
            verts[-1], vals[-1] = reflected, fr
        else:
            contracted = clip(centroid + 0.5 * (worst - centroid))
            fc = f(contracted)
            if fc > vals[-1]:
                verts[-1], vals[-1] = contracted, fc
            else:
                for k in range(1, len(verts)):
                    verts[k] = clip(verts[0] + 0.5 * (verts[k] - verts[0]))
                    vals[k] = f(verts[k])

    return SimplexResult(best_x, best_f, evals, False)


def el_global(model: MomentModel, sample: Sample, theta_init, bounds,
              simplex_opts: SimplexOptions = SimplexOptions(),
              solver: SolverOptions = SolverOptions()) -> EstimateResult:
    """Maximize the profile log-EL by simplex search inside a box.

    Infeasible parameters (zero outside the convex hull of the moments)
    evaluate to -inf and act as a barrier.  Raises AllInfeasible when no
    evaluated point was feasible.
    """
    surface = ELSurface(model, sample, solver)
    result = simplex_search(surface.loglik, theta_init, bounds, simplex_opts)
    if not np.isfinite(result.value):
        raise AllInfeasible("no feasible parameter encountered")
    inner = surface.solution(result.x)
    return EstimateResult(
        theta_hat=np.atleast_1d(result.x),
        method="el",
        converged=result.converged and inner.converged,
        objective_at_opt=result.value,
        inner=inner,
    )


def gmm_two_step(model: MomentModel, sample: Sample, theta_init, bounds,
                 simplex_opts: SimplexOptions = SimplexOptions(),
                 weight: np.ndarray | None = None) -> EstimateResult:
    """Two-step GMM: identity weight, then the inverse second-moment weight.

    weight overrides the second-step matrix (identity reproduces step one),
    mainly for tests.
    """
    obs = sample.observations
    n = sample.n

    def mbar(theta: np.ndarray) -> np.ndarray:
        m = np.asarray(model.evaluate(obs, theta), dtype=float)
        return m.reshape(n, -1).mean(axis=0)

    step1 = simplex_search(lambda t: -float(mbar(t) @ mbar(t)), theta_init,
                           bounds, simplex_opts)
    theta1 = step1.x

    if weight is None:
        m1 = np.asarray(model.evaluate(obs, theta1), dtype=float).reshape(n, -1)
        weight = m1.T @ m1 / n
    winv = numerics.invert_spd_ridge(np.asarray(weight, dtype=float)).inverse

    def objective2(theta: np.ndarray) -> float:
        g = mbar(theta)
        return -float(g @ winv @ g)

    step2 = simplex_search(objective2, theta1, bounds, simplex_opts)
    return EstimateResult(
        theta_hat=np.atleast_1d(step2.x),
        method="gmm",
        converged=step1.converged and step2.converged,
        objective_at_opt=step2.value,
    )
