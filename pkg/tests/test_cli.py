import os

import numpy as np
import pytest

from localel.cli import (
    ConfigError,
    MissingEstimates,
    cmd_plotdata,
    cmd_run,
    cmd_trace,
    main,
    parse_config,
    serialize_config,
)

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")


def write_config(tmp_path, body, name="run.cfg"):
    path = tmp_path / name
    path.write_text(body)
    return str(path)


MINIMAL = """
[run]
experiment = linear
methods = ls, iv, el, local-el:ls
reps = 2
seed = 7
workers = 1

[linear]
n = 120
c = 0.0

[el]
bounds = 0.0:4.0
"""


class TestParseConfig:
    def test_defaults_fill_missing_keys(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, "[run]\nreps = 3\n"))
        assert cfg.reps == 3
        assert cfg.experiment == "linear"
        assert cfg.linear.n == 1000

    def test_empty_file_with_overrides(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, ""), ["run.reps=5", "linear.c=0.01"])
        assert cfg.reps == 5 and cfg.linear.c == 0.01

    def test_unknown_key_names_nearest(self, tmp_path):
        with pytest.raises(ConfigError) as err:
            parse_config(write_config(tmp_path, "[run]\nrepz = 3\n"))
        assert "repz" in str(err.value) and "reps" in str(err.value)
        assert ":2" in str(err.value)  # line number

    def test_unknown_section(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(write_config(tmp_path, "[runner]\nreps = 3\n"))

    def test_type_mismatch_cites_line(self, tmp_path):
        with pytest.raises(ConfigError) as err:
            parse_config(write_config(tmp_path, "[run]\n\nreps = soon\n"))
        assert ":3" in str(err.value)

    def test_override_beats_file(self, tmp_path):
        path = write_config(tmp_path, "[run]\nseed = 1\n")
        cfg = parse_config(path, ["run.seed=99"])
        assert cfg.seed == 99 and cfg.linear.seed == 99

    def test_aux_must_be_runnable(self, tmp_path):
        body = "[run]\nexperiment = ckls\nmethods = el, local-el:ls\n"
        with pytest.raises(ConfigError):
            parse_config(write_config(tmp_path, body))

    def test_round_trip(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, MINIMAL))
        again = parse_config(write_config(tmp_path, serialize_config(cfg), "again.cfg"))
        assert cfg == again

    def test_shipped_fixtures_parse(self):
        for name in ("linear_case1", "linear_case2", "linear_case3",
                     "linear_case4", "ckls_case1", "ckls_case2", "trace_linear"):
            cfg = parse_config(os.path.join(CONFIGS, name + ".cfg"))
            assert cfg.methods


class TestCmdRun:
    def test_minimal_run_outputs(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, MINIMAL))
        out = str(tmp_path / "out")
        assert cmd_run(cfg, out) == 0
        metrics = (tmp_path / "out" / "metrics.csv").read_text().splitlines()
        assert metrics[0] == "method,mean,median,mse,rmse,iqr,mad,reps_used"
        assert len(metrics) == 1 + 4  # four methods
        estimates = (tmp_path / "out" / "estimates.csv").read_text().splitlines()
        assert estimates[0] == "replication,method,param_index,estimate"
        assert len(estimates) == 1 + 2 * 4  # reps x methods, d = 1
        manifest = (tmp_path / "out" / "manifest.txt").read_text()
        assert "config_hash = " in manifest
        assert "config.seed = 7" in manifest
        assert "file.metrics.csv.rows = 4" in manifest

    def test_single_rep_one_row_per_method(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, MINIMAL), ["run.reps=1"])
        out = str(tmp_path / "single")
        cmd_run(cfg, out)
        rows = (tmp_path / "single" / "estimates.csv").read_text().splitlines()[1:]
        methods = [r.split(",")[1] for r in rows]
        assert sorted(methods) == sorted(["ls", "iv", "el", "local-el(ls)"])

    def test_partial_outputs_removed_on_failure(self, tmp_path, monkeypatch):
        import localel.cli as cli_mod

        cfg = parse_config(write_config(tmp_path, MINIMAL), ["run.reps=1"])
        out = tmp_path / "broken"
        calls = {"n": 0}
        real = cli_mod._write_csv

        def failing(path, header, rows):
            calls["n"] += 1
            if calls["n"] == 2:
                raise OSError("disk full")
            return real(path, header, rows)

        monkeypatch.setattr(cli_mod, "_write_csv", failing)
        with pytest.raises(OSError):
            cmd_run(cfg, str(out))
        assert not (out / "estimates.csv").exists()
        assert not (out / "metrics.csv").exists()

    def test_byte_identical_reruns_and_workers(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, MINIMAL), ["run.reps=4"])
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        cmd_run(cfg, out1)
        cfg2 = parse_config(write_config(tmp_path, MINIMAL), ["run.reps=4", "run.workers=2"])
        cmd_run(cfg2, out2)
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b


class TestCmdTrace:
    def test_trace_rows_and_manifest(self, tmp_path):
        cfg = parse_config(os.path.join(CONFIGS, "trace_linear.cfg"))
        out = str(tmp_path / "trace")
        assert cmd_trace(cfg, out) == 0
        lines = (tmp_path / "trace" / "trace.csv").read_text().splitlines()
        assert lines[0] == "iter,lambda_norm,tau_norm,estimate"
        assert 1 <= len(lines) - 1 <= 50
        final_tau = float(lines[-1].split(",")[2])
        assert final_tau <= 1e-6
        manifest = (tmp_path / "trace" / "manifest.txt").read_text()
        assert "local_converged = true" in manifest

    def test_requires_local_method(self, tmp_path):
        body = MINIMAL.replace("ls, iv, el, local-el:ls", "ls, iv")
        cfg = parse_config(write_config(tmp_path, body))
        with pytest.raises(ConfigError):
            cmd_trace(cfg, str(tmp_path / "none"))

    def test_max_iter_one_single_row(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, MINIMAL), ["local.max_iter=1"])
        out = str(tmp_path / "one")
        cmd_trace(cfg, out)
        lines = (tmp_path / "one" / "trace.csv").read_text().splitlines()
        assert len(lines) == 2  # header + one data row


class TestCmdPlotdata:
    def test_qq_and_density_after_run(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, MINIMAL),
                           ["run.reps=25", "linear.n=400"])
        out = str(tmp_path / "study")
        cmd_run(cfg, out)
        assert cmd_plotdata(cfg, "qq", out) == 0
        assert cmd_plotdata(cfg, "density", out) == 0
        for method in ("ls", "iv", "el", "local-el_ls"):
            assert (tmp_path / "study" / f"qq_{method}.csv").exists()
            dens = (tmp_path / "study" / f"density_{method}.csv").read_text().splitlines()
            assert dens[0] == "x,density"
            xs = np.array([float(r.split(",")[0]) for r in dens[1:]])
            ys = np.array([float(r.split(",")[1]) for r in dens[1:]])
            assert abs(np.trapezoid(ys, xs) - 1.0) <= 1e-3

    def test_qq_missing_estimates(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, MINIMAL))
        with pytest.raises(MissingEstimates):
            cmd_plotdata(cfg, "qq", str(tmp_path / "nowhere"))

    def test_profile_spans_grid(self, tmp_path):
        overrides = ["profile.lo=1.6", "profile.hi=2.4", "profile.count=17"]
        cfg = parse_config(write_config(tmp_path, MINIMAL), overrides)
        out = str(tmp_path / "prof")
        cmd_plotdata(cfg, "profile", out)
        lines = (tmp_path / "prof" / "profile.csv").read_text().splitlines()
        assert lines[0] == "theta,log_el,log_el_clean"
        assert len(lines) == 1 + 17
        thetas = [float(r.split(",")[0]) for r in lines[1:]]
        assert thetas[0] == 1.6 and thetas[-1] == 2.4


CKLS_SMALL = """
[run]
experiment = ckls
methods = gmm, el, local-el:el
reps = 2
seed = 5
workers = 1

[ckls]
T = 80
c = 0.0

[local]
direction_step = 0.25
sparsify_c = 0.02

[el]
bounds = -1.0:1.0, -2.0:1.0, -1.0:4.0, 0.0001:5.0
"""


class TestCKLSPipeline:
    def test_run_writes_per_param_metrics(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, CKLS_SMALL))
        out = str(tmp_path / "rate")
        assert cmd_run(cfg, out) == 0
        per_param = (tmp_path / "rate" / "metrics_per_param.csv").read_text().splitlines()
        labels = {r.split(",")[0] for r in per_param[1:]}
        assert any(l.startswith("gmm[") for l in labels)
        assert len([l for l in labels if l.startswith("el[")]) == 4
        est = (tmp_path / "rate" / "estimates.csv").read_text().splitlines()[1:]
        assert len(est) == 2 * 3 * 4  # reps x methods x params

    def test_trace_multi_parameter_header(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, CKLS_SMALL))
        out = str(tmp_path / "rate_trace")
        assert cmd_trace(cfg, out) == 0
        header = (tmp_path / "rate_trace" / "trace.csv").read_text().splitlines()[0]
        assert header == "iter,lambda_norm,tau_norm,estimate_0,estimate_1,estimate_2,estimate_3"


class TestMain:
    def test_run_and_plotdata_cli(self, tmp_path):
        path = write_config(tmp_path, MINIMAL)
        out = str(tmp_path / "cli_out")
        assert main(["run", "--config", path, "--out", out, "--reps", "21"]) == 0
        assert main(["plotdata", "--config", path, "--out", out, "--kind", "qq"]) == 0
        assert os.path.exists(os.path.join(out, "qq_ls.csv"))

    def test_bad_config_exit_code(self, tmp_path):
        path = write_config(tmp_path, "[run]\nrepz = 1\n")
        assert main(["run", "--config", path]) == 1

    def test_set_overrides(self, tmp_path):
        path = write_config(tmp_path, MINIMAL)
        out = str(tmp_path / "ov")
        code = main(["run", "--config", path, "--out", out,
                     "--set", "run.reps=1", "--set", "linear.n=60"])
        assert code == 0
        rows = open(os.path.join(out, "estimates.csv")).read().splitlines()[1:]
        assert len(rows) == 4
