"""Simulation studies: contaminated linear IV and short-rate data generators,
their moment models, a seeded Monte Carlo runner, and table/plot emitters.

Contamination mixes a fraction c of shock draws from a mean-L normal into
the baseline standard-normal shocks, mildly misspecifying the moment
restriction without changing the data layout.  Replication r of a run
draws from the counter-based stream (seed, r), so results are independent
of both worker count and method ordering.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .elcore import MomentModel, Sample
from .estimators import (
    EstimateResult,
    SimplexOptions,
    el_global,
    gmm_two_step,
    instrumental_variables,
    least_squares,
)
from .local import LocalConfig, fit_local
from .numerics import RngStream, sample_mixture


class PathDegenerate(Exception):
    """Too many positivity corrections while simulating a rate path."""


class EmptyEstimates(Exception):
    """Metrics requested for an empty estimate list."""


# ---------------------------------------------------------------------------
# Linear instrumental-variable experiment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearDGPConfig:
    """y = x theta0 + eps, x = z pi + u, with contaminated u.

    u is drawn from (1-c) N(0,1) + c N(L,1); eps = R u + eps' couples the
    regressor and the error so least squares is biased.  The instrument is
    a constant plus noise; its scale sets the instrument strength and is
    not pinned down by the reference tables, so both knobs are exposed.
    """

    n: int = 1000
    theta0: float = 2.0
    pi: float = 1.0
    R: float = 0.1
    c: float = 0.0
    L: float = 10.0
    z_const: float = 0.28
    z_noise_sd: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.c <= 1.0:
            raise ValueError("contamination probability must be in [0, 1]")
        if self.n < 10:
            raise ValueError("need n >= 10")


@dataclass(frozen=True)
class LinearData:
    y: np.ndarray
    x: np.ndarray
    z: np.ndarray


def gen_linear(config: LinearDGPConfig, rng: RngStream) -> LinearData:
    n = config.n
    gen = rng.generator
    z = config.z_const + config.z_noise_sd * gen.standard_normal(n)
    u = sample_mixture(rng, config.c, (0.0, 1.0), (config.L, 1.0), n)
    eps = config.R * u + gen.standard_normal(n)
    x = z * config.pi + u
    y = x * config.theta0 + eps
    return LinearData(y=y, x=x, z=z)


def linear_sample(data: LinearData) -> Sample:
    return Sample(np.column_stack([data.y, data.x, data.z]))


def _linear_moments(obs: np.ndarray, theta: np.ndarray) -> np.ndarray:
    y, x, z = obs[:, 0], obs[:, 1], obs[:, 2]
    return (z * (y - x * theta[0]))[:, None]


def _linear_jacobian(obs: np.ndarray, theta: np.ndarray) -> np.ndarray:
    x, z = obs[:, 1], obs[:, 2]
    return (-(z * x))[:, None, None]


def linear_moment_model() -> MomentModel:
    """Single instrument orthogonality moment m = z (y - x theta)."""
    return MomentModel(param_dim=1, moment_dim=1,
                       evaluate=_linear_moments, jacobian=_linear_jacobian)


# ---------------------------------------------------------------------------
# Short-rate (CKLS-type) experiment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CKLSConfig:
    """r_{t+1} = r_t + alpha + beta r_t + sigma r_t^gamma sqrt(dt) u_t.

    The sqrt(dt) on the shock matches the dt carried by the variance
    moments, so the four moment restrictions have mean zero at the true
    parameters.  Shocks u_t are contaminated like the linear experiment.
    """

    T: int = 1000
    alpha: float = 0.05
    beta: float = -0.05
    gamma: float = 0.5
    sigma: float = 0.2
    r0: float = 0.05
    dt: float = 1.0 / 12.0
    c: float = 0.0
    L: float = 1000.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 0.0 <= self.c <= 1.0:
            raise ValueError("contamination probability must be in [0, 1]")

    @property
    def theta0(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma, self.sigma])


RATE_FLOOR = 1e-6


def gen_ckls(config: CKLSConfig, rng: RngStream,
             shocks: np.ndarray | None = None) -> np.ndarray:
    """Simulate r_0..r_T; reflects at RATE_FLOOR and counts corrections.

    shocks overrides the contaminated draws (test hook, e.g. all zeros for
    the deterministic recursion).
    """
    if shocks is None:
        shocks = sample_mixture(rng, config.c, (0.0, 1.0), (config.L, 1.0), config.T)
    r = np.empty(config.T + 1)
    r[0] = config.r0
    corrections = 0
    sq = math.sqrt(config.dt)
    for t in range(config.T):
        eps = config.sigma * r[t] ** config.gamma * sq * shocks[t]
        nxt = r[t] + config.alpha + config.beta * r[t] + eps
        if nxt < RATE_FLOOR:
            nxt = 2.0 * RATE_FLOOR - nxt
            corrections += 1
        r[t + 1] = nxt
    if corrections > 0.1 * config.T:
        raise PathDegenerate(f"{corrections} positivity corrections on {config.T} steps")
    return r


def ckls_sample(path: np.ndarray) -> Sample:
    """Consecutive (r_t, r_{t+1}) pairs as observation records."""
    path = np.asarray(path, dtype=float)
    return Sample(np.column_stack([path[:-1], path[1:]]))


def _ckls_moments_factory(dt: float):
    def evaluate(obs: np.ndarray, theta: np.ndarray) -> np.ndarray:
        alpha, beta, gamma, sigma = theta
        r, r_next = obs[:, 0], obs[:, 1]
        eps = (r_next - r) - alpha - beta * r
        var = sigma**2 * r ** (2.0 * gamma) * dt
        centered = eps**2 - var
        return np.column_stack([eps, eps * r, centered, centered * r])

    def jacobian(obs: np.ndarray, theta: np.ndarray) -> np.ndarray:
        alpha, beta, gamma, sigma = theta
        r, r_next = obs[:, 0], obs[:, 1]
        eps = (r_next - r) - alpha - beta * r
        pow_term = r ** (2.0 * gamma) * dt
        logr = np.log(r)
        n = r.shape[0]
        jac = np.zeros((n, 4, 4))
        jac[:, 0, 0] = -1.0
        jac[:, 0, 1] = -r
        jac[:, 1, 0] = -r
        jac[:, 1, 1] = -(r**2)
        jac[:, 2, 0] = -2.0 * eps
        jac[:, 2, 1] = -2.0 * eps * r
        jac[:, 2, 2] = -2.0 * sigma**2 * logr * pow_term
        jac[:, 2, 3] = -2.0 * sigma * pow_term
        jac[:, 3, :] = jac[:, 2, :] * r[:, None]
        return jac

    return evaluate, jacobian


def ckls_moment_model(dt: float = 1.0 / 12.0) -> MomentModel:
    """Four just-identifying moments: level, slope, variance, variance-slope."""
    evaluate, jacobian = _ckls_moments_factory(dt)
    return MomentModel(param_dim=4, moment_dim=4, evaluate=evaluate, jacobian=jacobian)


DEFAULT_CKLS_BOUNDS = ((-1.0, 1.0), (-2.0, 1.0), (-1.0, 4.0), (1e-4, 5.0))


def ckls_initial_guess(path: np.ndarray, dt: float,
                       bounds=DEFAULT_CKLS_BOUNDS) -> np.ndarray:
    """Regression warm start: OLS for the drift, log-variance OLS for (gamma, sigma).

    log eps^2 = log(sigma^2 r^{2 gamma} dt) + log u^2 and E[log u^2] for a
    squared standard normal is psi(1/2) + log 2 = -1.27036, which the
    intercept correction removes.
    """
    path = np.asarray(path, dtype=float)
    r, r_next = path[:-1], path[1:]
    dr = r_next - r
    design = np.column_stack([np.ones_like(r), r])
    drift, *_ = np.linalg.lstsq(design, dr, rcond=None)
    eps = dr - design @ drift
    eps2 = np.maximum(eps**2, 1e-300)
    logdesign = np.column_stack([np.ones_like(r), 2.0 * np.log(r)])
    coef, *_ = np.linalg.lstsq(logdesign, np.log(eps2 / dt), rcond=None)
    log_sigma2 = coef[0] + 1.2703628454614782
    guess = np.array([drift[0], drift[1], coef[1], math.exp(0.5 * log_sigma2)])
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    pad = 1e-6 * (hi - lo)
    return np.minimum(np.maximum(guess, lo + pad), hi - pad)


# ---------------------------------------------------------------------------
# Monte Carlo runner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MethodSpec:
    """A method row of the study: name in {ls, iv, el, gmm, local-el}."""

    name: str
    aux: str | None = None

    @property
    def label(self) -> str:
        if self.name == "local-el":
            return f"local-el({self.aux})"
        return self.name

    def __post_init__(self):
        if self.name == "local-el" and self.aux is None:
            raise ValueError("local-el needs an auxiliary method")


@dataclass(frozen=True)
class RunSettings:
    """Estimation knobs shared by every replication of a study."""

    local: LocalConfig = LocalConfig()
    el_bounds: tuple | None = None
    simplex: SimplexOptions = SimplexOptions()


@dataclass(frozen=True)
class MetricsRow:
    method: str
    mean: float
    median: float
    mse: float
    rmse: float
    iqr: float
    mad: float
    reps_used: int


@dataclass
class MCResult:
    theta0: np.ndarray
    methods: tuple[str, ...]
    estimates: dict[str, list]
    failures: dict[str, int]
    metrics: list[MetricsRow]
    per_param: list[MetricsRow]


def _linear_base_estimates(data: LinearData, model, sample, settings: RunSettings,
                           config: LinearDGPConfig):
    x = data.x[:, None]
    z = data.z[:, None]
    cache: dict[str, EstimateResult] = {}

    def run(name: str) -> EstimateResult:
        if name in cache:
            return cache[name]
        if name == "ls":
            res = least_squares(data.y, x)
        elif name == "iv":
            res = instrumental_variables(data.y, x, z)
        elif name == "gmm":
            res = gmm_two_step(model, sample, run("iv").theta_hat,
                               _linear_bounds(settings, config), settings.simplex)
        elif name == "el":
            bounds = _linear_bounds(settings, config)
            mid = np.array([0.5 * (lo + hi) for lo, hi in bounds])
            res = el_global(model, sample, mid, bounds, settings.simplex,
                            settings.local.solver)
        else:
            raise ValueError(f"unknown method {name!r}")
        cache[name] = res
        return res

    return run


def _linear_bounds(settings: RunSettings, config: LinearDGPConfig):
    if settings.el_bounds is not None:
        return settings.el_bounds
    return ((config.theta0 - 2.0, config.theta0 + 2.0),)


def _replicate_linear(config: LinearDGPConfig, methods: tuple[MethodSpec, ...],
                      settings: RunSettings, rep: int) -> dict[str, np.ndarray | None]:
    rng = RngStream(config.seed, rep)
    data = gen_linear(config, rng)
    model = linear_moment_model()
    sample = linear_sample(data)
    run = _linear_base_estimates(data, model, sample, settings, config)
    out: dict[str, np.ndarray | None] = {}
    for spec in methods:
        try:
            if spec.name == "local-el":
                aux = run(spec.aux).theta_hat
                fit = fit_local(model, sample, aux, settings.local,
                                bounds=_linear_bounds(settings, config))
                out[spec.label] = fit.estimate
            else:
                out[spec.label] = run(spec.name).theta_hat
        except Exception:
            out[spec.label] = None
    return out


def _replicate_ckls(config: CKLSConfig, methods: tuple[MethodSpec, ...],
                    settings: RunSettings, rep: int) -> dict[str, np.ndarray | None]:
    rng = RngStream(config.seed, rep)
    bounds = settings.el_bounds if settings.el_bounds is not None else DEFAULT_CKLS_BOUNDS
    try:
        path = gen_ckls(config, rng)
    except PathDegenerate:
        return {spec.label: None for spec in methods}
    model = ckls_moment_model(config.dt)
    sample = ckls_sample(path)
    init = ckls_initial_guess(path, config.dt, bounds)
    cache: dict[str, EstimateResult] = {}

    def run(name: str) -> EstimateResult:
        if name in cache:
            return cache[name]
        if name == "gmm":
            res = gmm_two_step(model, sample, init, bounds, settings.simplex)
        elif name == "el":
            res = el_global(model, sample, init, bounds, settings.simplex,
                            settings.local.solver)
        else:
            raise ValueError(f"unknown method {name!r} for the rate experiment")
        cache[name] = res
        return res

    out: dict[str, np.ndarray | None] = {}
    for spec in methods:
        try:
            if spec.name == "local-el":
                aux = run(spec.aux).theta_hat
                fit = fit_local(model, sample, aux, settings.local, bounds=bounds)
                out[spec.label] = fit.estimate
            else:
                out[spec.label] = run(spec.name).theta_hat
        except Exception:
            out[spec.label] = None
    return out


def _replicate(args):
    kind, config, methods, settings, rep = args
    if kind == "linear":
        return rep, _replicate_linear(config, methods, settings, rep)
    return rep, _replicate_ckls(config, methods, settings, rep)


def run_mc(config, methods, reps: int, parallelism: int = 1,
           settings: RunSettings = RunSettings()) -> MCResult:
    """Run the study; replication r draws from stream (config.seed, r).

    Per-method failures are dropped and counted, never aborting the run.
    The aggregation is an ordered reduction over replication index, so the
    result is identical for any parallelism degree and method ordering.
    """
    if reps < 1:
        raise ValueError("need reps >= 1")
    specs = tuple(MethodSpec(m, None) if isinstance(m, str) else m for m in methods)
    if isinstance(config, LinearDGPConfig):
        kind, theta0 = "linear", np.array([config.theta0])
    elif isinstance(config, CKLSConfig):
        kind, theta0 = "ckls", config.theta0
    else:
        raise TypeError("config must be LinearDGPConfig or CKLSConfig")

    tasks = [(kind, config, specs, settings, rep) for rep in range(reps)]
    results: list[dict] = [None] * reps
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            for rep, res in pool.map(_replicate, tasks, chunksize=8):
                results[rep] = res
    else:
        for task in tasks:
            rep, res = _replicate(task)
            results[rep] = res

    labels = tuple(spec.label for spec in specs)
    estimates = {label: [res[label] for res in results] for label in labels}
    failures = {label: sum(1 for e in estimates[label] if e is None) for label in labels}
    metrics = []
    per_param = []
    for label in labels:
        good = [e for e in estimates[label] if e is not None]
        if good:
            metrics.append(compute_metrics(good, theta0, method=label))
            if theta0.size > 1:
                for j in range(theta0.size):
                    per_param.append(
                        compute_metrics([g[j] for g in good], theta0[j],
                                        method=f"{label}[{j}]")
                    )
    return MCResult(theta0=theta0, methods=labels, estimates=estimates,
                    failures=failures, metrics=metrics, per_param=per_param)


def compute_metrics(estimates, theta0, method: str = "") -> MetricsRow:
    """Summary row; scalar metrics describe the estimates themselves, while
    multi-parameter rows pool the stacked per-parameter errors."""
    if len(estimates) == 0:
        raise EmptyEstimates("no estimates to summarize")
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    arr = np.array([np.atleast_1d(np.asarray(e, dtype=float)) for e in estimates])
    if theta0.size == 1:
        values = arr.ravel()
        errors = values - theta0[0]
    else:
        errors = (arr - theta0[None, :]).ravel()
        values = errors
    mse = float(np.mean(errors**2))
    q25, q75 = np.quantile(values, [0.25, 0.75])
    return MetricsRow(
        method=method,
        mean=float(np.mean(values)),
        median=float(np.median(values)),
        mse=mse,
        rmse=float(math.sqrt(mse)),
        iqr=float(q75 - q25),
        mad=float(np.median(np.abs(values - np.median(values)))),
        reps_used=len(estimates),
    )


# ---------------------------------------------------------------------------
# Plot-data emitters
# ---------------------------------------------------------------------------

def emit_qq(estimates) -> tuple[np.ndarray, np.ndarray]:
    """Standard-normal quantiles paired with sorted standardized estimates."""
    values = np.asarray(estimates, dtype=float).ravel()
    n = values.size
    if n < 20:
        raise ValueError("need at least 20 estimates")
    sd = values.std(ddof=1)
    if sd == 0:
        raise ValueError("degenerate (constant) estimates")
    std = np.sort((values - values.mean()) / sd)
    theoretical = ndtri((np.arange(1, n + 1) - 0.5) / n)
    return theoretical, std


def emit_density(estimates, grid: int = 256,
                 bandwidth: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-kernel density on an equispaced grid spanning the data +-3h."""
    values = np.asarray(estimates, dtype=float).ravel()
    n = values.size
    if n < 20:
        raise ValueError("need at least 20 estimates")
    if bandwidth is None:
        bandwidth = 1.06 * values.std(ddof=1) * n ** (-0.2)
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    xs = np.linspace(values.min() - 3 * bandwidth, values.max() + 3 * bandwidth, grid)
    z = (xs[:, None] - values[None, :]) / bandwidth
    dens = np.exp(-0.5 * z**2).sum(axis=1) / (n * bandwidth * math.sqrt(2 * math.pi))
    return xs, dens


def emit_likelihood_profile(model: MomentModel, sample: Sample,
                            theta_grid) -> list[tuple[float, float]]:
    """Per-theta total log-EL values; infeasible points carry -inf."""
    from .elcore import log_el

    out = []
    for theta in np.asarray(theta_grid, dtype=float).ravel():
        out.append((float(theta), log_el(model, sample, np.array([theta]))))
    return out
