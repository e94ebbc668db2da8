"""Tests for configuration handling, pipelines, artifacts, and the CLI."""

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from slowfastlab import rng
from slowfastlab.cli import (
    ConfigError,
    ExperimentConfig,
    PIPELINES,
    build_model,
    build_spec,
    default_spec_json,
    main,
    pipeline_spec_problems,
    read_ensemble_csv,
    run_compare,
    run_estimate,
    run_limit,
    run_pipeline,
    run_simulate,
    validate,
    write_ensemble_csv,
)
from slowfastlab.slowfast import ensemble_perturbed, integrate_averaged

TINY = dict(
    eps=(1e-1, 3e-2),
    n=60,
    n_limit=80,
    grid=(0.5, 1.0),
    seed=7,
    dt_limit=1e-2,
    estimators=dict(tau_n=200, sigma_steps=300, sigma_n=80, h_n=200,
                    gk_lags=10, gk_cells=5, gk_n=120),
)


def tiny_config(tmp_path, name="out", **over):
    kw = dict(TINY, pipeline="centered", outdir=str(tmp_path / name))
    kw.update(over)
    return ExperimentConfig(**kw)


class TestExperimentConfig:
    def test_defaults_are_valid(self):
        cfg = ExperimentConfig()
        assert cfg.pipeline == "centered"
        assert len(cfg.eps) == 4

    def test_sequences_normalized_to_float_tuples(self):
        cfg = ExperimentConfig(eps=[0.1, 0.01], grid=[1, 2])
        assert cfg.eps == (0.1, 0.01)
        assert cfg.grid == (1.0, 2.0)

    @pytest.mark.parametrize("bad", [
        dict(model="lorenz"),
        dict(alpha=1.5),
        dict(pipeline="quenched"),
        dict(eps=()),
        dict(eps=(0.1, 0.1)),
        dict(eps=(-0.1,)),
        dict(eps=(float("nan"),)),
        dict(n=0),
        dict(n_limit=0),
        dict(grid=()),
        dict(grid=(0.0, 1.0)),
        dict(grid=(1.0, 0.5)),
        dict(x0=float("inf")),
        dict(seed=-1),
        dict(dt_limit=0.0),
        dict(outdir=""),
        dict(jobs=0),
        dict(law="orbit"),
        dict(estimators=dict(bogus=3)),
        dict(estimators=dict(tau_n=-1)),
    ])
    def test_invalid_fields_rejected(self, bad):
        with pytest.raises(ConfigError):
            ExperimentConfig(**bad)

    def test_error_names_the_field(self):
        with pytest.raises(ConfigError, match="field 'pipeline'"):
            ExperimentConfig(pipeline="nope")

    def test_json_round_trip(self):
        cfg = ExperimentConfig(eps=(0.5, 0.25), n=7, grid=(0.1, 0.9),
                               spec=default_spec_json("centered"))
        again = ExperimentConfig.from_json(cfg.to_json())
        assert again == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            ExperimentConfig.from_dict({"epsilon": [0.1]})

    def test_from_file_missing(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_file(tmp_path / "nope.json")

    def test_from_file_reports_json_line(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"model": "toy",\n  "oops"\n}')
        with pytest.raises(ConfigError, match=r"bad\.json:3:1"):
            ExperimentConfig.from_file(path)

    def test_overrides_skip_none(self):
        cfg = ExperimentConfig(n=5)
        assert cfg.with_overrides(n=None, seed=None) == cfg
        assert cfg.with_overrides(seed=9).seed == 9


class TestSpecCompatibility:
    @pytest.mark.parametrize("pipeline", PIPELINES)
    def test_default_spec_fits_its_pipeline(self, pipeline):
        cfg = ExperimentConfig(pipeline=pipeline)
        assert pipeline_spec_problems(cfg) == []

    def test_integrable_rejects_centered_forcing(self):
        cfg = ExperimentConfig(pipeline="integrable",
                               spec=default_spec_json("centered"))
        assert pipeline_spec_problems(cfg)

    def test_integrable_rejects_drift_field(self):
        cfg = ExperimentConfig(pipeline="integrable",
                               spec=default_spec_json("non-centered"))
        assert pipeline_spec_problems(cfg)

    def test_centered_rejects_uncentered_forcing(self):
        cfg = ExperimentConfig(pipeline="centered",
                               spec=default_spec_json("integrable"))
        assert pipeline_spec_problems(cfg)

    def test_pipeline_raises_on_incompatible_spec(self, tmp_path):
        cfg = tiny_config(tmp_path, pipeline="integrable",
                          spec=default_spec_json("centered"))
        with pytest.raises(ConfigError):
            run_pipeline(cfg)


class TestValidate:
    def test_toy_config_all_green(self):
        report = validate(ExperimentConfig())
        assert report.ok
        names = [c.name for c in report.checks]
        assert "table-disjointness" in names
        assert "finite-horizon" in names

    def test_billiard_default_table_all_green(self):
        report = validate(ExperimentConfig(model="billiard"))
        assert report.ok

    def test_overlapping_discs_fail_disjointness(self):
        table = {"obstacles": [{"cx": 0.0, "cy": 0.0, "r": 0.3},
                               {"cx": 0.4, "cy": 0.0, "r": 0.3}],
                 "horizon_bound": 5.0}
        report = validate(ExperimentConfig(model="billiard", table=table))
        by_name = {c.name: c for c in report.checks}
        assert not by_name["table-disjointness"].ok
        assert not report.ok

    def test_empty_table_fails_horizon(self):
        table = {"obstacles": [], "horizon_bound": 5.0}
        report = validate(ExperimentConfig(model="billiard", table=table))
        by_name = {c.name: c for c in report.checks}
        assert by_name["table-disjointness"].ok
        assert not by_name["finite-horizon"].ok

    def test_incompatible_pipeline_flagged_not_raised(self):
        cfg = ExperimentConfig(pipeline="integrable",
                               spec=default_spec_json("centered"))
        report = validate(cfg)
        by_name = {c.name: c for c in report.checks}
        assert not by_name["pipeline-compatibility"].ok

    def test_report_serializes(self):
        doc = validate(ExperimentConfig()).to_dict()
        assert doc["ok"] is True
        assert all({"name", "ok", "detail"} <= set(c) for c in doc["checks"])


class TestEnsembleCsv:
    def test_round_trip_exact(self, tmp_path):
        gen = rng.substream(3, "csv", 0)
        values = gen.standard_normal((5, 3, 2))
        times = [0.25, 0.5, 1.0]
        path = tmp_path / "ens.csv"
        write_ensemble_csv(path, times, values)
        rt_times, rt_values = read_ensemble_csv(path)
        assert np.array_equal(rt_times, times)
        assert np.array_equal(rt_values, values)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "other.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ConfigError):
            read_ensemble_csv(path)


@pytest.fixture(scope="module")
def done(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = ExperimentConfig(**dict(TINY, pipeline="centered",
                                  outdir=str(root / "run")))
    return cfg, run_pipeline(cfg)


class TestRunPipeline:
    def test_exit_status_and_files(self, done):
        cfg, res = done
        assert res.exit_status == 0
        expected = {"config.json", "ensemble_eps00.csv", "ensemble_eps01.csv",
                    "limit_ensemble.csv", "estimates.csv", "comparisons.csv"}
        assert expected <= set(res.manifest["files"])
        for name in expected:
            assert (Path(cfg.outdir) / name).exists()

    def test_manifest_hashes_match_files(self, done):
        import hashlib
        cfg, res = done
        for name, digest in res.manifest["files"].items():
            data = (Path(cfg.outdir) / name).read_bytes()
            assert hashlib.sha256(data).hexdigest() == digest

    def test_manifest_documents_seeding(self, done):
        _cfg, res = done
        assert "SHA-256" in res.manifest["seed_derivation"]
        assert res.manifest["master_seed"] == TINY["seed"]

    def test_manifest_estimates(self, done):
        _cfg, res = done
        est = res.manifest["estimates"]
        assert {"tau_bar", "sigma", "h", "green_kubo"} <= set(est)
        assert est["tau_bar"]["samples"] == TINY["estimators"]["tau_n"]

    def test_comparisons_cover_ladder_and_grid(self, done):
        cfg, _res = done
        rows = (Path(cfg.outdir) / "comparisons.csv").read_text().splitlines()
        assert rows[0] == "eps,time,component,ks,threshold,n_a,n_b,passed"
        assert len(rows) - 1 == len(cfg.eps) * len(cfg.grid)
        for row in rows[1:]:
            ks = float(row.split(",")[3])
            assert 0.0 <= ks <= 1.0

    def test_config_artifact_reproduces_config(self, done):
        cfg, _res = done
        text = (Path(cfg.outdir) / "config.json").read_text()
        assert ExperimentConfig.from_json(text) == cfg

    def test_exponent_fit_skipped_below_three_rungs(self, done):
        cfg, res = done
        assert "exponent_fit" not in res.manifest
        assert any("exponent fit skipped" in n for n in res.manifest["notes"])

    def test_scaled_ensemble_matches_direct_recomputation(self, done):
        cfg, _res = done
        flow = build_model(cfg)
        spec = build_spec(cfg, flow)
        eps = cfg.eps[0]
        horizon = cfg.grid[-1]
        xvals, _ = ensemble_perturbed(
            spec, flow, eps, horizon, cfg.n, cfg.seed, x0=cfg.x0,
            record_times=np.asarray(cfg.grid), law=cfg.law, tag="dyn-eps00")
        wpath = integrate_averaged(spec.fbar, cfg.x0, horizon,
                                   dt=horizon / 2000.0,
                                   record_times=np.asarray(cfg.grid))
        expected = (xvals - wpath.values[None, :, :]) * eps ** -0.75
        _times, got = read_ensemble_csv(
            Path(cfg.outdir) / "ensemble_eps00.csv")
        assert np.array_equal(got, expected)

    def test_reruns_byte_identical(self, tmp_path, done):
        cfg, _res = done
        cfg2 = dataclasses.replace(cfg, outdir=str(tmp_path / "again"))
        run_pipeline(cfg2)
        for name in ("ensemble_eps00.csv", "ensemble_eps01.csv",
                     "limit_ensemble.csv", "estimates.csv",
                     "comparisons.csv"):
            assert (Path(cfg.outdir) / name).read_bytes() == \
                   (Path(cfg2.outdir) / name).read_bytes()

    def test_master_seed_changes_output(self, tmp_path, done):
        cfg, _res = done
        cfg2 = dataclasses.replace(cfg, seed=cfg.seed + 1,
                                   outdir=str(tmp_path / "reseeded"))
        run_pipeline(cfg2)
        assert (Path(cfg.outdir) / "ensemble_eps00.csv").read_bytes() != \
               (Path(cfg2.outdir) / "ensemble_eps00.csv").read_bytes()

    def test_worker_pool_reproduces_serial_run(self, tmp_path, done):
        cfg, _res = done
        cfg2 = dataclasses.replace(cfg, jobs=2,
                                   outdir=str(tmp_path / "pool"))
        run_pipeline(cfg2)
        for name in ("ensemble_eps00.csv", "ensemble_eps01.csv",
                     "comparisons.csv"):
            assert (Path(cfg.outdir) / name).read_bytes() == \
                   (Path(cfg2.outdir) / name).read_bytes()

    def test_three_rungs_produce_exponent_fit(self, tmp_path):
        cfg = tiny_config(tmp_path, "fit", eps=(1e-1, 3e-2, 1e-2), n=40,
                          n_limit=60)
        res = run_pipeline(cfg)
        assert "exponent_fit" in res.manifest
        fit = res.manifest["exponent_fit"]
        assert np.isfinite(fit["slope"])
        assert fit["expected"] == 0.75
        lines = (Path(cfg.outdir) /
                 "exponent_fit.csv").read_text().splitlines()
        assert lines[0] == "eps,median_sup,fitted"
        assert len(lines) == 4

    def test_small_ensembles_skip_comparisons(self, tmp_path):
        cfg = tiny_config(tmp_path, "small", n=10, n_limit=10)
        res = run_pipeline(cfg)
        assert res.exit_status == 0
        assert any("comparisons skipped" in n for n in res.manifest["notes"])
        rows = (Path(cfg.outdir) /
                "comparisons.csv").read_text().splitlines()
        assert len(rows) == 1  # header only

    @pytest.mark.parametrize("pipeline",
                             ["integrable", "non-centered", "birkhoff"])
    def test_other_pipelines_run(self, tmp_path, pipeline):
        cfg = tiny_config(tmp_path, pipeline, pipeline=pipeline, n=50,
                          n_limit=60)
        res = run_pipeline(cfg)
        assert res.exit_status == 0
        assert (Path(cfg.outdir) / "limit_ensemble.csv").exists()


class TestSubcommands:
    def test_stepwise_flow_matches_pipeline(self, tmp_path):
        cfg_pipe = tiny_config(tmp_path, "whole")
        run_pipeline(cfg_pipe)
        cfg_steps = tiny_config(tmp_path, "steps")
        run_simulate(cfg_steps)
        run_limit(cfg_steps)
        res = run_compare(cfg_steps)
        assert res.exit_status == 0
        assert (Path(cfg_steps.outdir) / "comparisons.csv").read_bytes() == \
               (Path(cfg_pipe.outdir) / "comparisons.csv").read_bytes()
        manifest = json.loads(
            (Path(cfg_steps.outdir) / "manifest.json").read_text())
        assert {"config.json", "limit_ensemble.csv",
                "comparisons.csv"} <= set(manifest["files"])

    def test_estimate_writes_table(self, tmp_path):
        cfg = tiny_config(tmp_path, "est", pipeline="integrable")
        run_estimate(cfg)
        lines = (Path(cfg.outdir) / "estimates.csv").read_text().splitlines()
        assert lines[0] == "name,value,stderr,tail_bound,samples"
        names = {line.split(",")[0] for line in lines[1:]}
        assert {"h", "sigma", "tau_bar"} <= names

    def test_compare_requires_artifacts(self, tmp_path):
        cfg = tiny_config(tmp_path, "empty")
        Path(cfg.outdir).mkdir(parents=True)
        with pytest.raises(ConfigError, match="limit"):
            run_compare(cfg)

    def test_compare_rejects_mismatched_grids(self, tmp_path):
        cfg = tiny_config(tmp_path, "mismatch", eps=(0.1,))
        out = Path(cfg.outdir)
        out.mkdir(parents=True)
        gen = rng.substream(5, "mismatch", 0)
        write_ensemble_csv(out / "ensemble_eps00.csv", [0.5, 1.0],
                           gen.standard_normal((60, 2, 1)))
        write_ensemble_csv(out / "limit_ensemble.csv", [0.5, 2.0],
                           gen.standard_normal((60, 2, 1)))
        with pytest.raises(ConfigError, match="record times"):
            run_compare(cfg)

    def test_compare_skips_undersized_ensembles(self, tmp_path):
        cfg = tiny_config(tmp_path, "small", eps=(0.1,), strict=True)
        out = Path(cfg.outdir)
        out.mkdir(parents=True)
        gen = rng.substream(9, "smallcmp", 0)
        write_ensemble_csv(out / "ensemble_eps00.csv", [1.0],
                           gen.standard_normal((30, 1, 1)))
        write_ensemble_csv(out / "limit_ensemble.csv", [1.0],
                           gen.standard_normal((40, 1, 1)))
        res = run_compare(cfg)
        assert res.exit_status == 0
        lines = (out / "comparisons.csv").read_text().splitlines()
        assert len(lines) == 1  # header only
        assert any("50 samples" in n for n in res.manifest["notes"])

    def test_strict_compare_fails_on_mismatched_laws(self, tmp_path):
        cfg = tiny_config(tmp_path, "bad", eps=(0.1,), strict=True)
        out = Path(cfg.outdir)
        out.mkdir(parents=True)
        gen = rng.substream(6, "strictfail", 0)
        write_ensemble_csv(out / "ensemble_eps00.csv", [1.0],
                           gen.standard_normal((100, 1, 1)) + 5.0)
        write_ensemble_csv(out / "limit_ensemble.csv", [1.0],
                           gen.standard_normal((100, 1, 1)))
        res = run_compare(cfg)
        assert res.exit_status == 1
        relaxed = run_compare(dataclasses.replace(cfg, strict=False))
        assert relaxed.exit_status == 0


class TestMain:
    def _write_cfg(self, tmp_path, **over):
        cfg = tiny_config(tmp_path, "cli", **over)
        path = tmp_path / "config.json"
        path.write_text(cfg.to_json())
        return cfg, path

    def test_pipeline_command(self, tmp_path, capsys):
        cfg, path = self._write_cfg(tmp_path)
        rc = main(["pipeline", "--config", str(path)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "wrote" in out
        assert (Path(cfg.outdir) / "manifest.json").exists()

    def test_flag_overrides_written_to_config_artifact(self, tmp_path):
        _cfg, path = self._write_cfg(tmp_path)
        outdir = tmp_path / "override"
        rc = main(["simulate", "--config", str(path),
                   "--eps", "0.2", "--n", "12", "--seed", "99",
                   "--out", str(outdir)])
        assert rc == 0
        stored = ExperimentConfig.from_file(outdir / "config.json")
        assert stored.eps == (0.2,)
        assert stored.n == 12
        assert stored.seed == 99

    def test_env_var_beats_out_flag(self, tmp_path, monkeypatch):
        _cfg, path = self._write_cfg(tmp_path)
        env_dir = tmp_path / "from-env"
        monkeypatch.setenv("SLOWFAST_OUT", str(env_dir))
        rc = main(["simulate", "--config", str(path),
                   "--out", str(tmp_path / "from-flag"), "--n", "12"])
        assert rc == 0
        assert (env_dir / "config.json").exists()
        assert not (tmp_path / "from-flag").exists()

    def test_validate_command(self, tmp_path, capsys):
        _cfg, path = self._write_cfg(tmp_path)
        rc = main(["validate", "--config", str(path)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "configuration OK" in out

    def test_validate_reports_failure(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path, "v", model="billiard",
                          table={"obstacles": [], "horizon_bound": 5.0})
        path = tmp_path / "cfg.json"
        path.write_text(cfg.to_json())
        rc = main(["validate", "--config", str(path)])
        assert rc == 1
        assert "FAIL" in capsys.readouterr().out

    def test_config_errors_exit_2(self, tmp_path, capsys):
        rc = main(["pipeline", "--config", str(tmp_path / "missing.json")])
        assert rc == 2
        assert "config error" in capsys.readouterr().err
        bad = tmp_path / "bad.json"
        bad.write_text("{broken")
        assert main(["validate", "--config", str(bad)]) == 2
        _cfg, path = self._write_cfg(tmp_path)
        assert main(["pipeline", "--config", str(path),
                     "--eps", "abc"]) == 2

    def test_strict_flag_reaches_compare(self, tmp_path):
        outdir = tmp_path / "strictdir"
        outdir.mkdir()
        gen = rng.substream(8, "cli-strict", 0)
        write_ensemble_csv(outdir / "ensemble_eps00.csv", [1.0],
                           gen.standard_normal((100, 1, 1)) + 5.0)
        write_ensemble_csv(outdir / "limit_ensemble.csv", [1.0],
                           gen.standard_normal((100, 1, 1)))
        cfg = tiny_config(tmp_path, "strictdir", eps=(0.1,))
        path = tmp_path / "cfg.json"
        path.write_text(cfg.to_json())
        assert main(["compare", "--config", str(path), "--strict"]) == 1
        assert main(["compare", "--config", str(path)]) == 0
