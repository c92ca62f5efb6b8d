"""Command-line front end: run Monte Carlo studies, dump local-iteration
traces, and export plot data as delimited text.

Config files are line-oriented `key = value` under `[section]` headers;
full-line comments start with '#'.  Unknown sections or keys are hard
errors (a silent typo in c, L, or reps would invalidate a comparison), and
command-line `--set section.key=value` overrides win over file values.
"""

from __future__ import annotations

import argparse
import difflib
import hashlib
import os
import sys
from dataclasses import dataclass, replace

import numpy as np

from .elcore import log_el
from .experiments import (
    CKLSConfig,
    LinearDGPConfig,
    MethodSpec,
    RunSettings,
    emit_density,
    emit_likelihood_profile,
    emit_qq,
    gen_ckls,
    gen_linear,
    ckls_initial_guess,
    ckls_moment_model,
    ckls_sample,
    linear_moment_model,
    linear_sample,
    run_mc,
)
from .estimators import el_global, gmm_two_step, instrumental_variables, least_squares
from .local import LocalConfig, PowerDelta, fit_local
from .numerics import RngStream


class ConfigError(Exception):
    """Config file problem; message cites file, line, and key."""


class MissingEstimates(Exception):
    """plotdata needs estimates.csv from a prior run."""


LINEAR_METHODS = ("ls", "iv", "el", "gmm")
CKLS_METHODS = ("el", "gmm")

# section -> key -> (kind, default); kind in int/float/str/choice/methods/bounds
SCHEMA = {
    "run": {
        "experiment": ("choice", ("linear", "ckls"), "linear"),
        "methods": ("methods", None, "ls, iv, el, local-el:ls"),
        "reps": ("int", None, 100),
        "seed": ("int", None, 20240801),
        "workers": ("int", None, max(1, os.cpu_count() or 1)),
        "output_dir": ("str", None, "out"),
    },
    "linear": {
        "n": ("int", None, 1000),
        "theta0": ("float", None, 2.0),
        "pi": ("float", None, 1.0),
        "R": ("float", None, 0.1),
        "c": ("float", None, 0.0),
        "L": ("float", None, 10.0),
        "z_const": ("float", None, 0.28),
        "z_noise_sd": ("float", None, 0.1),
    },
    "ckls": {
        "T": ("int", None, 1000),
        "alpha": ("float", None, 0.05),
        "beta": ("float", None, -0.05),
        "gamma": ("float", None, 0.5),
        "sigma": ("float", None, 0.2),
        "r0": ("float", None, 0.05),
        "dt": ("float", None, 1.0 / 12.0),
        "c": ("float", None, 0.0),
        "L": ("float", None, 1000.0),
    },
    "local": {
        "delta_exponent": ("float", None, -0.5),
        "direction_step": ("float", None, 1.0),
        "sparsify_c": ("float", None, 1.0),
        "tau_tol": ("float", None, 1e-6),
        "max_iter": ("int", None, 50),
        "hessian_mode": ("choice", ("definition", "directional"), "definition"),
    },
    "el": {
        "bounds": ("bounds", None, None),
    },
    "profile": {
        "lo": ("float", None, 1.0),
        "hi": ("float", None, 3.0),
        "count": ("int", None, 81),
    },
}


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    methods: tuple[MethodSpec, ...]
    reps: int
    seed: int
    workers: int
    output_dir: str
    linear: LinearDGPConfig
    ckls: CKLSConfig
    local: LocalConfig
    el_bounds: tuple | None
    profile_lo: float
    profile_hi: float
    profile_count: int

    def settings(self) -> RunSettings:
        return RunSettings(local=self.local, el_bounds=self.el_bounds)

    def dgp(self):
        return self.linear if self.experiment == "linear" else self.ckls


def _parse_methods(raw: str, where: str) -> tuple[MethodSpec, ...]:
    specs = []
    for token in [t.strip() for t in raw.split(",") if t.strip()]:
        if ":" in token:
            name, aux = token.split(":", 1)
            specs.append(MethodSpec(name.strip(), aux.strip()))
        else:
            specs.append(MethodSpec(token))
    if not specs:
        raise ConfigError(f"{where}: methods list is empty")
    return tuple(specs)


def _parse_bounds(raw: str, where: str) -> tuple:
    pairs = []
    for token in [t.strip() for t in raw.split(",") if t.strip()]:
        if ":" not in token:
            raise ConfigError(f"{where}: bounds entries look like lo:hi, got {token!r}")
        lo, hi = token.split(":", 1)
        try:
            pairs.append((float(lo), float(hi)))
        except ValueError:
            raise ConfigError(f"{where}: bounds entry {token!r} is not numeric")
    if not pairs:
        raise ConfigError(f"{where}: bounds list is empty")
    return tuple(pairs)


def _coerce(section: str, key: str, raw: str, where: str):
    kind, extra, _default = SCHEMA[section][key]
    raw = raw.strip()
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: key '{key}' expects an integer, got {raw!r}")
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: key '{key}' expects a number, got {raw!r}")
    if kind == "choice":
        if raw not in extra:
            raise ConfigError(f"{where}: key '{key}' must be one of {extra}, got {raw!r}")
        return raw
    if kind == "methods":
        return _parse_methods(raw, where)
    if kind == "bounds":
        return _parse_bounds(raw, where)
    return raw


def _unknown(kind: str, name: str, valid, where: str) -> ConfigError:
    close = difflib.get_close_matches(name, list(valid), n=1)
    hint = f" (did you mean '{close[0]}'?)" if close else ""
    return ConfigError(f"{where}: unknown {kind} '{name}'{hint}")


def parse_config(path: str, overrides=()) -> RunConfig:
    """Parse a config file plus 'section.key=value' override strings."""
    values: dict[tuple[str, str], object] = {}
    section = None
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}")
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        where = f"{path}:{lineno}"
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in SCHEMA:
                raise _unknown("section", section, SCHEMA, where)
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got {stripped!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside any [section]")
        key, raw = [part.strip() for part in stripped.split("=", 1)]
        if key not in SCHEMA[section]:
            raise _unknown("key", key, SCHEMA[section], f"{where} in [{section}]")
        values[(section, key)] = _coerce(section, key, raw, where)

    for i, ov in enumerate(overrides, start=1):
        where = f"<override {i}>"
        if "=" not in ov:
            raise ConfigError(f"{where}: overrides look like section.key=value, got {ov!r}")
        target, raw = ov.split("=", 1)
        if "." not in target:
            raise ConfigError(f"{where}: overrides look like section.key=value, got {ov!r}")
        section, key = target.strip().split(".", 1)
        if section not in SCHEMA:
            raise _unknown("section", section, SCHEMA, where)
        if key not in SCHEMA[section]:
            raise _unknown("key", key, SCHEMA[section], f"{where} in [{section}]")
        values[(section, key)] = _coerce(section, key, raw, where)

    return _build(values)


def _get(values, section, key):
    if (section, key) in values:
        return values[(section, key)]
    return SCHEMA[section][key][2]


def _build(values) -> RunConfig:
    experiment = _get(values, "run", "experiment")
    methods = _get(values, "run", "methods")
    if isinstance(methods, str):
        methods = _parse_methods(methods, "<default>")
    seed = _get(values, "run", "seed")
    allowed = LINEAR_METHODS if experiment == "linear" else CKLS_METHODS
    for spec in methods:
        base = spec.aux if spec.name == "local-el" else spec.name
        if spec.name not in allowed and spec.name != "local-el":
            raise ConfigError(
                f"method '{spec.name}' is not runnable on experiment '{experiment}'"
            )
        if spec.name == "local-el" and base not in allowed:
            raise ConfigError(
                f"local-el auxiliary '{base}' is not runnable on experiment '{experiment}'"
            )

    linear = LinearDGPConfig(
        n=_get(values, "linear", "n"),
        theta0=_get(values, "linear", "theta0"),
        pi=_get(values, "linear", "pi"),
        R=_get(values, "linear", "R"),
        c=_get(values, "linear", "c"),
        L=_get(values, "linear", "L"),
        z_const=_get(values, "linear", "z_const"),
        z_noise_sd=_get(values, "linear", "z_noise_sd"),
        seed=seed,
    )
    ckls = CKLSConfig(
        T=_get(values, "ckls", "T"),
        alpha=_get(values, "ckls", "alpha"),
        beta=_get(values, "ckls", "beta"),
        gamma=_get(values, "ckls", "gamma"),
        sigma=_get(values, "ckls", "sigma"),
        r0=_get(values, "ckls", "r0"),
        dt=_get(values, "ckls", "dt"),
        c=_get(values, "ckls", "c"),
        L=_get(values, "ckls", "L"),
        seed=seed,
    )
    local = LocalConfig(
        delta_rule=PowerDelta(_get(values, "local", "delta_exponent")),
        direction_step=_get(values, "local", "direction_step"),
        sparsify_c=_get(values, "local", "sparsify_c"),
        tau_tol=_get(values, "local", "tau_tol"),
        max_iter=_get(values, "local", "max_iter"),
        hessian_mode=_get(values, "local", "hessian_mode"),
    )
    return RunConfig(
        experiment=experiment,
        methods=methods,
        reps=_get(values, "run", "reps"),
        seed=seed,
        workers=_get(values, "run", "workers"),
        output_dir=_get(values, "run", "output_dir"),
        linear=linear,
        ckls=ckls,
        local=local,
        el_bounds=_get(values, "el", "bounds"),
        profile_lo=_get(values, "profile", "lo"),
        profile_hi=_get(values, "profile", "hi"),
        profile_count=_get(values, "profile", "count"),
    )


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form; parse(serialize(cfg)) == cfg."""
    methods = ", ".join(
        f"{s.name}:{s.aux}" if s.name == "local-el" else s.name for s in cfg.methods
    )
    lines = [
        "[run]",
        f"experiment = {cfg.experiment}",
        f"methods = {methods}",
        f"reps = {cfg.reps}",
        f"seed = {cfg.seed}",
        f"workers = {cfg.workers}",
        f"output_dir = {cfg.output_dir}",
        "",
        "[linear]",
        f"n = {cfg.linear.n}",
        f"theta0 = {cfg.linear.theta0!r}",
        f"pi = {cfg.linear.pi!r}",
        f"R = {cfg.linear.R!r}",
        f"c = {cfg.linear.c!r}",
        f"L = {cfg.linear.L!r}",
        f"z_const = {cfg.linear.z_const!r}",
        f"z_noise_sd = {cfg.linear.z_noise_sd!r}",
        "",
        "[ckls]",
        f"T = {cfg.ckls.T}",
        f"alpha = {cfg.ckls.alpha!r}",
        f"beta = {cfg.ckls.beta!r}",
        f"gamma = {cfg.ckls.gamma!r}",
        f"sigma = {cfg.ckls.sigma!r}",
        f"r0 = {cfg.ckls.r0!r}",
        f"dt = {cfg.ckls.dt!r}",
        f"c = {cfg.ckls.c!r}",
        f"L = {cfg.ckls.L!r}",
        "",
        "[local]",
        f"delta_exponent = {cfg.local.delta_rule.exponent!r}",
        f"direction_step = {cfg.local.direction_step!r}",
        f"sparsify_c = {cfg.local.sparsify_c!r}",
        f"tau_tol = {cfg.local.tau_tol!r}",
        f"max_iter = {cfg.local.max_iter}",
        f"hessian_mode = {cfg.local.hessian_mode}",
        "",
        "[profile]",
        f"lo = {cfg.profile_lo!r}",
        f"hi = {cfg.profile_hi!r}",
        f"count = {cfg.profile_count}",
    ]
    if cfg.el_bounds is not None:
        bounds = ", ".join(f"{lo!r}:{hi!r}" for lo, hi in cfg.el_bounds)
        lines += ["", "[el]", f"bounds = {bounds}"]
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _write_csv(path: str, header, rows) -> int:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        count = 0
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
            count += 1
    return count


def _safe_label(label: str) -> str:
    return label.replace("(", "_").replace(")", "")


def _config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()


def _write_manifest(out_dir: str, cfg: RunConfig, file_rows: dict[str, int],
                    extra: dict | None = None) -> str:
    path = os.path.join(out_dir, "manifest.txt")
    merged = {}
    if os.path.exists(path):
        # keep entries for files written by earlier commands into this dir
        with open(path) as fh:
            for line in fh:
                if line.startswith("file."):
                    key, _, val = line.strip().partition(" = ")
                    merged[key] = val
    for name, rows in file_rows.items():
        merged[f"file.{name}.rows"] = str(rows)
    with open(path, "w", newline="\n") as fh:
        fh.write(f"config_hash = {_config_hash(cfg)}\n")
        for line in serialize_config(cfg).splitlines():
            if line.startswith("[") or not line:
                continue
            key, _, val = line.partition(" = ")
            fh.write(f"config.{key} = {val}\n")
        for key in sorted(merged):
            fh.write(f"{key} = {merged[key]}\n")
        for key, val in (extra or {}).items():
            fh.write(f"{key} = {val}\n")
    return path


class _OutputTracker:
    """Removes partially written outputs when a command fails."""

    def __init__(self):
        self.paths: list[str] = []

    def add(self, path: str) -> str:
        self.paths.append(path)
        return path

    def cleanup(self):
        for path in self.paths:
            try:
                os.unlink(path)
            except OSError:
                pass


def cmd_run(cfg: RunConfig, out_dir: str | None = None) -> int:
    out = out_dir or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    tracker = _OutputTracker()
    try:
        result = run_mc(cfg.dgp(), cfg.methods, cfg.reps, cfg.workers, cfg.settings())
        est_rows = []
        for rep in range(cfg.reps):
            for label in result.methods:
                est = result.estimates[label][rep]
                if est is None:
                    continue
                for j, v in enumerate(np.atleast_1d(est)):
                    est_rows.append((rep, label, j, float(v)))
        files = {}
        path = tracker.add(os.path.join(out, "estimates.csv"))
        files["estimates.csv"] = _write_csv(
            path, ["replication", "method", "param_index", "estimate"], est_rows
        )
        met_rows = [
            (m.method, m.mean, m.median, m.mse, m.rmse, m.iqr, m.mad, m.reps_used)
            for m in result.metrics
        ]
        path = tracker.add(os.path.join(out, "metrics.csv"))
        header = ["method", "mean", "median", "mse", "rmse", "iqr", "mad", "reps_used"]
        files["metrics.csv"] = _write_csv(path, header, met_rows)
        if result.per_param:
            pp_rows = [
                (m.method, m.mean, m.median, m.mse, m.rmse, m.iqr, m.mad, m.reps_used)
                for m in result.per_param
            ]
            path = tracker.add(os.path.join(out, "metrics_per_param.csv"))
            files["metrics_per_param.csv"] = _write_csv(path, header, pp_rows)
        extra = {f"failures.{k}": v for k, v in sorted(result.failures.items())}
        _write_manifest(out, cfg, files, extra)
    except Exception:
        tracker.cleanup()
        raise
    return 0


def _trace_fit(cfg: RunConfig, rep: int = 0):
    spec = next((s for s in cfg.methods if s.name == "local-el"), None)
    if spec is None:
        raise ConfigError("trace requires a local-el method in run.methods")
    settings = cfg.settings()
    if cfg.experiment == "linear":
        config = cfg.linear
        data = gen_linear(config, RngStream(config.seed, rep))
        model = linear_moment_model()
        sample = linear_sample(data)
        x, z = data.x[:, None], data.z[:, None]
        if spec.aux == "ls":
            aux = least_squares(data.y, x).theta_hat
        elif spec.aux == "iv":
            aux = instrumental_variables(data.y, x, z).theta_hat
        else:
            bounds = cfg.el_bounds or ((config.theta0 - 2.0, config.theta0 + 2.0),)
            start = instrumental_variables(data.y, x, z).theta_hat
            if spec.aux == "el":
                aux = el_global(model, sample, start, bounds).theta_hat
            else:
                aux = gmm_two_step(model, sample, start, bounds).theta_hat
    else:
        config = cfg.ckls
        path = gen_ckls(config, RngStream(config.seed, rep))
        model = ckls_moment_model(config.dt)
        sample = ckls_sample(path)
        from .experiments import DEFAULT_CKLS_BOUNDS

        bounds = cfg.el_bounds or DEFAULT_CKLS_BOUNDS
        init = ckls_initial_guess(path, config.dt, bounds)
        if spec.aux == "el":
            aux = el_global(model, sample, init, bounds).theta_hat
        else:
            aux = gmm_two_step(model, sample, init, bounds).theta_hat
    return fit_local(model, sample, aux, settings.local)


def cmd_trace(cfg: RunConfig, out_dir: str | None = None, rep: int = 0) -> int:
    out = out_dir or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    tracker = _OutputTracker()
    try:
        fit = _trace_fit(cfg, rep)
        d = fit.estimate.size
        if d == 1:
            header = ["iter", "lambda_norm", "tau_norm", "estimate"]
        else:
            header = ["iter", "lambda_norm", "tau_norm"] + [
                f"estimate_{j}" for j in range(d)
            ]
        rows = [
            (row.iteration, row.lambda_norm, row.tau_norm, *row.estimate)
            for row in fit.trace
        ]
        path = tracker.add(os.path.join(out, "trace.csv"))
        nrows = _write_csv(path, header, rows)
        _write_manifest(out, cfg, {"trace.csv": nrows},
                        {"local_converged": str(fit.converged).lower(),
                         "replication": rep})
    except Exception:
        tracker.cleanup()
        raise
    return 0


def _load_estimates(out: str) -> dict[str, dict[int, list[float]]]:
    path = os.path.join(out, "estimates.csv")
    if not os.path.exists(path):
        raise MissingEstimates(
            f"{path} not found; run the 'run' command into this directory first"
        )
    grouped: dict[str, dict[int, list[float]]] = {}
    with open(path) as fh:
        next(fh)
        for line in fh:
            rep, label, j, v = line.rstrip("\n").split(",")
            grouped.setdefault(label, {}).setdefault(int(j), []).append(float(v))
    return grouped


def cmd_plotdata(cfg: RunConfig, kind: str, out_dir: str | None = None) -> int:
    out = out_dir or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    tracker = _OutputTracker()
    try:
        if kind in ("qq", "density"):
            grouped = _load_estimates(out)
            files = {}
            for label, by_param in sorted(grouped.items()):
                multi = len(by_param) > 1
                for j, vals in sorted(by_param.items()):
                    stem = f"{kind}_{_safe_label(label)}" + (f"_{j}" if multi else "")
                    path = tracker.add(os.path.join(out, stem + ".csv"))
                    if kind == "qq":
                        theo, emp = emit_qq(vals)
                        files[stem + ".csv"] = _write_csv(
                            path, ["theoretical", "empirical"], zip(theo, emp)
                        )
                    else:
                        xs, dens = emit_density(vals)
                        files[stem + ".csv"] = _write_csv(
                            path, ["x", "density"], zip(xs, dens)
                        )
            _write_manifest(out, cfg, files, {"kind": kind})
        elif kind == "profile":
            if cfg.experiment != "linear":
                raise ConfigError("profile plot data is defined for the linear experiment")
            grid = np.linspace(cfg.profile_lo, cfg.profile_hi, cfg.profile_count)
            model = linear_moment_model()
            data = gen_linear(cfg.linear, RngStream(cfg.linear.seed, 0))
            clean_cfg = replace(cfg.linear, c=0.0)
            clean = gen_linear(clean_cfg, RngStream(cfg.linear.seed, 0))
            sample, clean_sample = linear_sample(data), linear_sample(clean)
            prof = emit_likelihood_profile(model, sample, grid)
            prof_clean = emit_likelihood_profile(model, clean_sample, grid)
            rows = [
                (theta, v, vc)
                for (theta, v), (_, vc) in zip(prof, prof_clean)
            ]
            path = tracker.add(os.path.join(out, "profile.csv"))
            nrows = _write_csv(path, ["theta", "log_el", "log_el_clean"], rows)
            _write_manifest(out, cfg, {"profile.csv": nrows}, {"kind": kind})
        else:
            raise ConfigError(f"unknown plot kind {kind!r}")
    except Exception:
        tracker.cleanup()
        raise
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="localel",
        description="Empirical likelihood estimation studies: run, trace, plotdata.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "run a Monte Carlo study and write metrics/estimates"),
        ("trace", "write the local-iteration trace for one replication"),
        ("plotdata", "export qq / density / profile plot data"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the config file")
        p.add_argument("--out", help="output directory (overrides run.output_dir)")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--reps", type=int, help="override run.reps")
        p.add_argument("--workers", type=int, help="override run.workers")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override any config key (repeatable)")
        if name == "plotdata":
            p.add_argument("--kind", required=True, choices=("qq", "density", "profile"))
        if name == "trace":
            p.add_argument("--rep", type=int, default=0,
                           help="replication index to trace (default 0)")
    args = parser.parse_args(argv)

    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.reps is not None:
        overrides.append(f"run.reps={args.reps}")
    if args.workers is not None:
        overrides.append(f"run.workers={args.workers}")

    try:
        cfg = parse_config(args.config, overrides)
        if args.command == "run":
            return cmd_run(cfg, args.out)
        if args.command == "trace":
            return cmd_trace(cfg, args.out, args.rep)
        return cmd_plotdata(cfg, args.kind, args.out)
    except (ConfigError, MissingEstimates) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # estimation/runtime failure: report, nonzero exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
