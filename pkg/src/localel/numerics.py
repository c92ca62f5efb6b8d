"""Dense linear-algebra kernels, numerical differentiation, root finding, RNG streams.

Matrices are plain float64 ndarrays; everything here is sized for small
systems (dim ~ 10), called from hot loops upstream.  Random sampling uses
counter-based Philox streams keyed by (seed, stream_id) so Monte Carlo
replications can be drawn independently and reproducibly in any order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError


class NotPositiveDefinite(Exception):
    """Cholesky pivot <= 0; caller may retry with a ridge."""


class SingularAfterRidge(Exception):
    """Ridge escalation exhausted without a successful factorization."""


class NonFinite(Exception):
    """A function evaluation returned nan or inf."""


class NoSignChange(Exception):
    """Bisection bracket endpoints do not straddle a root."""


def _check_symmetric(a: np.ndarray, rtol: float = 1e-12) -> None:
    scale = max(1.0, float(np.abs(a).max()))
    if np.abs(a - a.T).max() > rtol * scale:
        raise ValueError("matrix is not symmetric within tolerance")


def cholesky_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b for symmetric positive definite a.

    Raises NotPositiveDefinite when the factorization hits a nonpositive
    pivot, which signals the caller to fall back to `invert_spd_ridge`.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_symmetric(a)
    try:
        factor = cho_factor(a, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    return cho_solve(factor, b, check_finite=False)


@dataclass(frozen=True)
class RidgeInverse:
    inverse: np.ndarray
    ridge: float


def invert_spd_ridge(a: np.ndarray, ridge: float = 0.0) -> RidgeInverse:
    """Invert a symmetric matrix, escalating a diagonal ridge on failure.

    Schedule: the requested ridge first, then 1e-10 * |trace|/dim stepped up
    by decades to a cap of 1e-2 * |trace|/dim.  Records the ridge that
    actually succeeded.  abs(trace) guards fixtures whose trace is
    nonpositive; such matrices exhaust the schedule and raise.
    """
    a = np.asarray(a, dtype=float)
    _check_symmetric(a)
    dim = a.shape[0]
    eye = np.eye(dim)
    scale = max(abs(float(np.trace(a))) / dim, np.finfo(float).tiny)
    floor, cap = 1e-10 * scale, 1e-2 * scale
    schedule = [ridge]
    level = floor
    while level <= cap * (1 + 1e-12):
        if level > ridge:
            schedule.append(level)
        level *= 10.0
    for r in schedule:
        try:
            factor = cho_factor(a + r * eye, lower=True, check_finite=False)
        except LinAlgError:
            continue
        return RidgeInverse(cho_solve(factor, eye, check_finite=False), r)
    raise SingularAfterRidge(
        f"no positive definite factorization up to ridge {cap:.3e}"
    )


def default_step(x0: float) -> float:
    """Default initial half-width for romberg_derivative."""
    return max(1e-4, 1e-4 * abs(x0))


def romberg_derivative(f, x0: float, h0: float | None = None, levels: int = 5):
    """Richardson-extrapolated central-difference derivative of f at x0.

    f may return a scalar or an ndarray (the whole tableau is broadcast).
    Returns (estimate, gap) where gap is the magnitude of the last
    extrapolation update, a cheap error proxy.  Exact for polynomials of
    degree <= 2*levels - 1 up to rounding.
    """
    if not 2 <= levels <= 8:
        raise ValueError("levels must be in [2, 8]")
    if h0 is None:
        h0 = default_step(x0)
    rows = []
    h = float(h0)
    for i in range(levels):
        hi = h / 2.0**i
        d0 = (np.asarray(f(x0 + hi), dtype=float) - np.asarray(f(x0 - hi), dtype=float)) / (2.0 * hi)
        if not np.all(np.isfinite(d0)):
            raise NonFinite(f"non-finite evaluation at step {hi:g}")
        row = [d0]
        for j in range(1, i + 1):
            prev = rows[i - 1]
            row.append(row[j - 1] + (row[j - 1] - prev[j - 1]) / (4.0**j - 1.0))
        rows.append(row)
    best = rows[-1][-1]
    gap = float(np.max(np.abs(rows[-1][-1] - rows[-1][-2]))) if levels > 1 else np.inf
    return best, gap


def bisect_root(g, lo: float, hi: float, tol: float) -> float:
    """Bisection on [lo, hi]; stops at |g(x)| <= tol or bracket width <= tol."""
    if not lo < hi:
        raise ValueError("need lo < hi")
    glo, ghi = g(lo), g(hi)
    if glo * ghi > 0:
        raise NoSignChange(f"g({lo:g})={glo:g} and g({hi:g})={ghi:g} have equal signs")
    if abs(glo) <= tol:
        return lo
    if abs(ghi) <= tol:
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        if abs(gm) <= tol:
            return mid
        if glo * gm <= 0:
            hi = mid
        else:
            lo, glo = mid, gm
    return 0.5 * (lo + hi)


@dataclass
class RngStream:
    """Counter-based random stream: identical (seed, stream_id) replay identically."""

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream_id]))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


def sample_normal(rng: RngStream, mean: float, sd: float, n: int) -> np.ndarray:
    if sd <= 0:
        raise ValueError("sd must be positive")
    return mean + sd * rng.generator.standard_normal(n)


def sample_mixture(rng: RngStream, c: float, comp1, comp2, n: int) -> np.ndarray:
    """Draw n values, each from comp2=(mean, sd) with probability c, else comp1.

    Consumes exactly n uniforms and n normals so the draw sequence is
    invariant to c.
    """
    if not 0.0 <= c <= 1.0:
        raise ValueError("mixture probability must be in [0, 1]")
    gen = rng.generator
    pick2 = gen.random(n) < c
    z = gen.standard_normal(n)
    mean = np.where(pick2, comp2[0], comp1[0])
    sd = np.where(pick2, comp2[1], comp1[1])
    return mean + sd * z
