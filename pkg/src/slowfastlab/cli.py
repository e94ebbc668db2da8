"""Experiment orchestration: configs, pipelines, artifacts, command line.

A single JSON config describes one experiment: which fast model drives the
slow variable, which forcing family perturbs it, the ladder of time-scale
ratios, ensemble sizes, the record grid, and a master seed.  The config is
itself an artifact — every run writes the resolved config next to its outputs
so a directory can be reproduced from its own contents.

Pipelines (one per limit theorem exercised by the package):

  integrable    sqrt-normalized displacement of the slow variable from its
                start against the local-time drift at frozen argument.
  non-centered  sqrt-normalized deviation from the averaged path against the
                local-time drift integral with its variation-of-constants
                correction.
  centered      3/4-normalized deviation from the averaged path against the
                time-changed stochastic integral with its correction.
  birkhoff      quarter-normalized moving-argument orbit integrals against
                the time-changed stochastic integral along the diagonal.

Every stochastic routine draws from counter-based streams derived from the
master seed (see the rng module), so reruns with the same config and seed
produce byte-identical CSV files regardless of worker count or scheduling.
Wall-clock timings live only in the JSON manifest, never in CSVs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .dynsys import BilliardSectionBase, SuspensionFlow, ToyDoublingBase
from .geometry import BilliardTable, default_table, validate_finite_horizon
from .limitproc import LimitLawParams, sample_limit_law
from .slowfast import (
    TrigFamilyParams,
    ensemble_perturbed,
    ensemble_perturbed_birkhoff,
    integrate_averaged,
    trig_nu_mean,
    trig_params_of,
    trig_spec,
)
from .stats import (
    compare_to_limit,
    estimate_h,
    estimate_sigma,
    estimate_tau_bar,
    exponent_fit,
    green_kubo,
)

PIPELINES = ("integrable", "non-centered", "centered", "birkhoff")
MODELS = ("toy", "billiard")
LAWS = ("volume", "section")

LIMIT_KIND = {
    "integrable": "integrable",
    "non-centered": "noncentered",
    "centered": "centered",
    "birkhoff": "birkhoff",
}

# normalization exponent applied to the raw deviation before comparison
ERROR_EXPONENT = {"integrable": 0.5, "non-centered": 0.5, "centered": 0.75}

# expected log-log slope of the median sup of the *raw* deviation
EXPECTED_SLOPE = {
    "integrable": 0.5,
    "non-centered": 0.5,
    "centered": 0.75,
    "birkhoff": -0.25,
}
SLOPE_TOL = 0.10

SEED_DERIVATION_NOTE = (
    "All randomness comes from numpy Philox streams keyed by the first 128 "
    "bits of SHA-256('<master_seed>:<purpose_tag>'); per-trajectory and "
    "per-bundle indices occupy the highest Philox counter word.  Streams are "
    "therefore independent of execution order and of the --jobs worker "
    "count, which is what makes reruns byte-identical."
)

ESTIMATOR_KEYS = (
    "tau_n", "sigma_steps", "sigma_n", "h_n", "gk_lags", "gk_cells", "gk_n",
)

_COLUMN_RE = re.compile(r"^t(?P<t>[^_]+)_c(?P<c>\d+)$")


class ConfigError(ValueError):
    """Configuration rejected; the message pinpoints the offending field."""


def _bad(fieldname: str, msg: str) -> ConfigError:
    return ConfigError(f"field '{fieldname}': {msg}")


def default_spec_json(pipeline: str) -> dict:
    """Forcing-family parameters compatible with the requested pipeline."""
    spec = {
        "family": "trig_cell",
        "amp": [1.0, 0.5, 1.0, 0.0],
        "mean": [0.0, 0.0, 0.0, 0.0],
        "base_coeffs": [0.2, 0.4, 1.0],
        "fiber_amp": 0.0,
        "cell_decay": 4.5,
        "cell_cutoff": None,
        "decay_exponent": 0.25,
        "center": False,
    }
    if pipeline in ("non-centered", "centered"):
        spec["mean"] = [0.0, 0.4, 1.0, 0.0]
    if pipeline in ("centered", "birkhoff"):
        spec["center"] = True
    return spec


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete description of one experiment run."""

    model: str = "toy"
    alpha: float = 0.3
    table: dict | None = None
    spec: dict | None = None
    pipeline: str = "centered"
    eps: tuple[float, ...] = (1e-2, 1e-3, 1e-4, 1e-5)
    n: int = 400
    n_limit: int | None = None
    grid: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    x0: float = 0.1
    seed: int = 2024
    dt_limit: float = 1e-3
    outdir: str = "runs/out"
    jobs: int | None = None
    strict: bool = False
    law: str = "volume"
    estimators: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "eps",
                           tuple(float(e) for e in self.eps))
        object.__setattr__(self, "grid",
                           tuple(float(t) for t in self.grid))
        if self.model not in MODELS:
            raise _bad("model", f"must be one of {MODELS}, got {self.model!r}")
        if not (0.0 <= self.alpha < 1.0):
            raise _bad("alpha", f"must lie in [0, 1), got {self.alpha}")
        if self.table is not None and not isinstance(self.table, dict):
            raise _bad("table", "must be an obstacle-layout object or null")
        if self.spec is not None and not isinstance(self.spec, dict):
            raise _bad("spec", "must be a forcing-family object or null")
        if self.pipeline not in PIPELINES:
            raise _bad("pipeline",
                       f"must be one of {PIPELINES}, got {self.pipeline!r}")
        if len(self.eps) == 0:
            raise _bad("eps", "needs at least one value")
        for e in self.eps:
            if not (math.isfinite(e) and e > 0):
                raise _bad("eps", f"values must be finite and positive, got {e}")
        if len(set(self.eps)) != len(self.eps):
            raise _bad("eps", "values must be distinct")
        if not (isinstance(self.n, int) and self.n >= 1):
            raise _bad("n", f"must be an integer >= 1, got {self.n!r}")
        if self.n_limit is not None and not (
                isinstance(self.n_limit, int) and self.n_limit >= 1):
            raise _bad("n_limit", f"must be null or an integer >= 1, "
                                  f"got {self.n_limit!r}")
        if len(self.grid) == 0:
            raise _bad("grid", "needs at least one record time")
        if not all(math.isfinite(t) for t in self.grid):
            raise _bad("grid", "record times must be finite")
        if self.grid[0] <= 0.0:
            raise _bad("grid", f"record times must be positive, "
                               f"got {self.grid[0]}")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise _bad("grid", "record times must be strictly increasing")
        if not math.isfinite(self.x0):
            raise _bad("x0", "must be finite")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise _bad("seed", f"must be a nonnegative integer, "
                               f"got {self.seed!r}")
        if not (self.dt_limit > 0):
            raise _bad("dt_limit", f"must be positive, got {self.dt_limit}")
        if not self.outdir:
            raise _bad("outdir", "must be a nonempty path")
        if self.jobs is not None and not (
                isinstance(self.jobs, int) and self.jobs >= 1):
            raise _bad("jobs", f"must be null or an integer >= 1, "
                               f"got {self.jobs!r}")
        if self.law not in LAWS:
            raise _bad("law", f"must be one of {LAWS}, got {self.law!r}")
        if not isinstance(self.estimators, dict):
            raise _bad("estimators", "must be an object")
        for key, val in self.estimators.items():
            if key not in ESTIMATOR_KEYS:
                raise _bad("estimators", f"unknown key {key!r}; "
                                         f"known keys: {ESTIMATOR_KEYS}")
            if not (isinstance(val, int) and val >= 0):
                raise _bad("estimators",
                           f"{key} must be a nonnegative integer, got {val!r}")

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eps"] = list(self.eps)
        d["grid"] = list(self.grid)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**obj)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from exc
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        try:
            return cls.from_dict(obj)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        live = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **live) if live else self


# ---------------------------------------------------------------------------
# model / forcing construction
# ---------------------------------------------------------------------------


def build_model(cfg: ExperimentConfig) -> SuspensionFlow:
    if cfg.model == "toy":
        return SuspensionFlow(ToyDoublingBase(cfg.alpha))
    table = (BilliardTable.from_json(json.dumps(cfg.table))
             if cfg.table is not None else default_table())
    return SuspensionFlow(BilliardSectionBase(table))


def _spec_json(cfg: ExperimentConfig) -> dict:
    return dict(cfg.spec) if cfg.spec is not None \
        else default_spec_json(cfg.pipeline)


def _spec_params(cfg: ExperimentConfig) -> tuple[TrigFamilyParams, bool]:
    obj = _spec_json(cfg)
    center = bool(obj.pop("center", False))
    obj.pop("centered", None)
    obj.pop("center_mode", None)
    try:
        return TrigFamilyParams.from_json(obj), center
    except (ValueError, TypeError) as exc:
        raise _bad("spec", str(exc)) from exc


def build_spec(cfg: ExperimentConfig, flow: SuspensionFlow):
    params, center = _spec_params(cfg)
    return trig_spec(flow.base, params, center=center)


def pipeline_spec_problems(cfg: ExperimentConfig) -> list[str]:
    """Incompatibilities between the pipeline and the forcing parameters."""
    try:
        params, center = _spec_params(cfg)
    except ConfigError as exc:
        return [str(exc)]
    problems = []
    mean_zero = params.mean[0] == 0.0 and params.mean[1] == 0.0
    if cfg.pipeline == "integrable":
        if center:
            problems.append(
                "the integrable pipeline needs uncentered forcing; its limit "
                "is the space average times the local time, which vanishes "
                "for centered forcing")
        if not mean_zero:
            problems.append(
                "the integrable pipeline has no averaged drift field; set "
                "the mean coefficients to zero or use non-centered")
    elif cfg.pipeline == "non-centered":
        if center:
            problems.append(
                "the non-centered pipeline needs forcing with a nonzero "
                "space average; this forcing is centered")
    else:  # centered, birkhoff
        if not center:
            problems.append(
                f"the {cfg.pipeline} pipeline needs centered forcing "
                "(set \"center\": true in the forcing parameters)")
    if cfg.pipeline != "birkhoff" and not center:
        b0, b1, b2 = params.base_coeffs
        if b0 == 0.0 and b1 == 0.0 and b2 == 0.0 and params.fiber_amp == 0.0:
            problems.append("the forcing is identically zero")
    return problems


# ---------------------------------------------------------------------------
# parameter estimation
# ---------------------------------------------------------------------------


def _estimate_parameters(cfg: ExperimentConfig, spec, flow) -> dict:
    """Point estimates feeding the limit-law parameters, keyed by name."""
    opts = cfg.estimators
    toy = isinstance(flow.base, ToyDoublingBase)
    tau_n = opts.get("tau_n", 2000)
    sigma_steps = opts.get("sigma_steps", 2000 if toy else 400)
    sigma_n = opts.get("sigma_n", 300 if toy else 150)
    h_n = opts.get("h_n", 2000 if toy else 500)
    out = {
        "tau_bar": estimate_tau_bar(flow, tau_n, seed=cfg.seed),
        "sigma": estimate_sigma(flow, sigma_steps, sigma_n, seed=cfg.seed),
        "h": estimate_h(spec, flow, cfg.x0, N=h_n, seed=cfg.seed),
    }
    if LIMIT_KIND[cfg.pipeline] in ("centered", "birkhoff"):
        gk_kwargs: dict[str, Any] = {"seed": cfg.seed}
        if "gk_lags" in opts:
            gk_kwargs["L_max"] = opts["gk_lags"]
        if "gk_cells" in opts:
            gk_kwargs["M_max"] = opts["gk_cells"]
        if "gk_n" in opts:
            gk_kwargs["N"] = opts["gk_n"]
        out["green_kubo"] = green_kubo(spec, flow, cfg.x0, **gk_kwargs)
    return out


def _limit_arguments(cfg: ExperimentConfig, spec, estimates: dict):
    """LimitLawParams plus the averaged field callables for the limit kind."""
    kind = LIMIT_KIND[cfg.pipeline]
    h_of = trig_nu_mean(spec) if kind in ("integrable", "noncentered") \
        else None
    a_of = None
    if kind in ("centered", "birkhoff"):
        gk = estimates["green_kubo"]
        a0, a1, a2, a3 = trig_params_of(spec).amp
        amp_at = lambda x: a0 + a1 * math.sin(a2 * x + a3)  # noqa: E731
        amp0 = amp_at(cfg.x0)
        if abs(amp0) < 1e-12:
            raise _bad("x0", "the slow amplitude factor vanishes at x0, so "
                             "the pointwise variance estimate cannot be "
                             "extended to a variance profile")
        unit = float(gk.value[0, 0]) / (amp0 * amp0)

        def a_of(x, _unit=unit, _amp=amp_at):
            ax = _amp(float(np.atleast_1d(x)[0]))
            return np.array([[_unit * ax * ax]])

    params = LimitLawParams(
        tau_bar=float(estimates["tau_bar"].value),
        Sigma=float(estimates["sigma"].value),
        a_of=a_of, h_of=h_of, dim=1)
    use_field = kind in ("noncentered", "centered")
    fbar = spec.fbar if use_field else None
    dfbar = spec.dfbar if use_field else None
    return params, fbar, dfbar


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------


def _dynamics_ensemble(cfg: ExperimentConfig, spec, flow, eps: float,
                       idx: int):
    """One slow-dynamics ensemble: (scaled deviations, raw sups, info)."""
    grid = np.asarray(cfg.grid, dtype=float)
    horizon = float(grid[-1])
    tag = f"dyn-eps{idx:02d}"
    if cfg.pipeline == "birkhoff":
        values, info = ensemble_perturbed_birkhoff(
            spec, flow, eps, grid, cfg.n, cfg.seed, x0=cfg.x0, law=cfg.law,
            tag=tag)
        scaled = values
        raw = values * eps ** -0.25
    else:
        xvals, info = ensemble_perturbed(
            spec, flow, eps, horizon, cfg.n, cfg.seed, x0=cfg.x0,
            record_times=grid, law=cfg.law, tag=tag)
        if cfg.pipeline == "integrable":
            wvals = np.full((len(grid), xvals.shape[2]), cfg.x0)
        else:
            wpath = integrate_averaged(spec.fbar, cfg.x0, horizon,
                                       dt=horizon / 2000.0,
                                       record_times=grid)
            wvals = wpath.values
        raw = xvals - wvals[None, :, :]
        scaled = raw * eps ** -ERROR_EXPONENT[cfg.pipeline]
    sup = np.max(np.abs(raw), axis=(1, 2))
    return scaled, sup, info


def _eps_job(cfg_json: str, idx: int):
    cfg = ExperimentConfig.from_json(cfg_json)
    flow = build_model(cfg)
    spec = build_spec(cfg, flow)
    return _dynamics_ensemble(cfg, spec, flow, cfg.eps[idx], idx)


def _run_dynamics(cfg: ExperimentConfig, spec, flow) -> list:
    jobs = cfg.jobs if cfg.jobs is not None else (os.cpu_count() or 1)
    jobs = min(jobs, len(cfg.eps))
    if jobs <= 1:
        return [_dynamics_ensemble(cfg, spec, flow, e, i)
                for i, e in enumerate(cfg.eps)]
    cfg_json = cfg.to_json()
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_eps_job, [cfg_json] * len(cfg.eps),
                             range(len(cfg.eps))))


def _limit_ensemble(cfg: ExperimentConfig, spec, estimates: dict):
    params, fbar, dfbar = _limit_arguments(cfg, spec, estimates)
    grid0 = np.concatenate([[0.0], np.asarray(cfg.grid, dtype=float)])
    n_lim = cfg.n_limit if cfg.n_limit is not None else cfg.n
    values, info = sample_limit_law(
        params, LIMIT_KIND[cfg.pipeline], cfg.x0, grid0, n_lim, cfg.seed,
        fbar=fbar, dfbar=dfbar, dt=cfg.dt_limit)
    info = dict(info)
    info["times"] = list(cfg.grid)
    return values[:, 1:, :], info


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def write_ensemble_csv(path: Path, times, values: np.ndarray) -> None:
    """(n, n_times, dim) ensemble as one row per trajectory."""
    n, n_times, dim = values.shape
    header = ["traj"] + [f"t{_fmt(t)}_c{c}"
                         for t in times for c in range(dim)]
    flat = values.reshape(n, n_times * dim)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(n):
            writer.writerow([i] + [_fmt(v) for v in flat[i]])


def read_ensemble_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of write_ensemble_csv: (times, values (n, n_times, dim))."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["traj"]:
        raise ConfigError(f"{path}: not an ensemble file (bad header)")
    times: list[float] = []
    dims: list[int] = []
    for col in rows[0][1:]:
        m = _COLUMN_RE.match(col)
        if not m:
            raise ConfigError(f"{path}: unrecognized column {col!r}")
        t = float(m.group("t"))
        if not times or t != times[-1]:
            times.append(t)
            dims.append(0)
        dims[-1] += 1
    dim = dims[0]
    if any(d != dim for d in dims):
        raise ConfigError(f"{path}: ragged component columns")
    data = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    return np.asarray(times), data.reshape(len(data), len(times), dim)


def write_comparisons_csv(path: Path, rows: list[dict]) -> None:
    cols = ["eps", "time", "component", "ks", "threshold", "n_a", "n_b",
            "passed"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in rows:
            writer.writerow([
                _fmt(row["eps"]), _fmt(row["time"]), row["component"],
                _fmt(row["ks"]), _fmt(row["threshold"]), row["n_a"],
                row["n_b"], int(row["passed"]),
            ])


def write_exponent_csv(path: Path, eps_values, medians, fit) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["eps", "median_sup", "fitted"])
        for e, med in zip(eps_values, medians):
            fitted = math.exp(fit.intercept + fit.slope * math.log(e))
            writer.writerow([_fmt(e), _fmt(med), _fmt(fitted)])


def write_estimates_csv(path: Path, estimates: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["name", "value", "stderr", "tail_bound", "samples"])
        for name in sorted(estimates):
            est = estimates[name]
            value = np.atleast_1d(np.asarray(est.value, dtype=float))
            err = np.atleast_1d(np.asarray(est.stderr, dtype=float))
            writer.writerow([
                name, _fmt(value.ravel()[0]), _fmt(err.ravel()[0]),
                _fmt(getattr(est, "tail_bound", 0.0)),
                getattr(est, "n", getattr(est, "samples", 0)),
            ])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(outdir: Path, filenames: list[str],
                   extra: dict | None = None) -> dict:
    """Merge file hashes and run metadata into <outdir>/manifest.json."""
    man_path = outdir / "manifest.json"
    doc: dict = {}
    if man_path.exists():
        doc = json.loads(man_path.read_text())
    files = doc.get("files", {})
    for name in filenames:
        files[name] = _sha256(outdir / name)
    doc.update(extra or {})
    doc["files"] = dict(sorted(files.items()))
    doc["seed_derivation"] = SEED_DERIVATION_NOTE
    man_path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return doc


def _estimates_meta(estimates: dict) -> dict:
    out = {}
    for name, est in estimates.items():
        entry = {
            "value": np.asarray(est.value, dtype=float).tolist(),
            "stderr": np.asarray(est.stderr, dtype=float).tolist(),
            "tail_bound": float(getattr(est, "tail_bound", 0.0)),
            "samples": int(getattr(est, "n", getattr(est, "samples", 0))),
        }
        out[name] = entry
    return out


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[CheckResult, ...]

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "checks": [asdict(c) for c in self.checks],
        }


def validate(cfg: ExperimentConfig) -> ValidationReport:
    """Static checks on a config; never raises — the report is the result."""
    checks: list[CheckResult] = []

    checks.append(CheckResult(
        "grid", True,
        f"{len(cfg.grid)} record times in (0, {cfg.grid[-1]:g}], "
        f"strictly increasing"))
    checks.append(CheckResult(
        "eps-ladder", True,
        f"{len(cfg.eps)} positive distinct values in "
        f"[{min(cfg.eps):g}, {max(cfg.eps):g}]"))

    try:
        params, _center = _spec_params(cfg)
        if params.cell_cutoff is not None:
            detail = f"hard cell cutoff at |m| <= {params.cell_cutoff}"
        else:
            needed = 2.0 * (1.0 + params.decay_exponent) + 1.0
            detail = (f"envelope exponent {params.cell_decay:g} > required "
                      f"{needed:g} (margin {params.cell_decay - needed:g})")
        checks.append(CheckResult("spec-decay", True, detail))
    except ConfigError as exc:
        checks.append(CheckResult("spec-decay", False, str(exc)))

    problems = pipeline_spec_problems(cfg)
    checks.append(CheckResult(
        "pipeline-compatibility", not problems,
        "; ".join(problems) if problems
        else f"forcing parameters fit the {cfg.pipeline} pipeline"))

    if cfg.model == "toy":
        checks.append(CheckResult(
            "table-disjointness", True, "no obstacle table in this model"))
        checks.append(CheckResult(
            "finite-horizon", True,
            f"roof bounded in [{1 - cfg.alpha:g}, {1 + cfg.alpha:g}]"))
    else:
        try:
            table = (BilliardTable.from_json(json.dumps(cfg.table))
                     if cfg.table is not None else default_table())
        except (ValueError, KeyError, TypeError) as exc:
            checks.append(CheckResult("table-disjointness", False,
                                      f"table rejected: {exc}"))
            checks.append(CheckResult("finite-horizon", False,
                                      "table rejected"))
            return ValidationReport(tuple(checks))
        violations = table.disjointness_violations()
        checks.append(CheckResult(
            "table-disjointness", not violations,
            violations[0] if violations
            else f"{len(table.obstacles)} obstacle(s), all translates "
                 f"disjoint"))
        horizon = validate_finite_horizon(table, seed=cfg.seed)
        detail = (f"max sampled flight {horizon.max_flight:.4g} over "
                  f"{horizon.n_samples} flights (cap {horizon.cap:g})")
        if not horizon.ok and horizon.witness is not None:
            detail = f"{horizon.witness[2]} at {horizon.witness[0]}"
        checks.append(CheckResult("finite-horizon", horizon.ok, detail))

    return ValidationReport(tuple(checks))


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineResult:
    exit_status: int
    outdir: Path
    manifest: dict


def _comparison_rows(cfg: ExperimentConfig, scaled_by_eps: list[np.ndarray],
                     limit_values: np.ndarray) -> tuple[list[dict], str]:
    n_lim = limit_values.shape[0]
    if min(cfg.n, n_lim) < 50:
        return [], ("comparisons skipped: distribution tests need at least "
                    "50 samples per side")
    rows = []
    for eps, scaled in zip(cfg.eps, scaled_by_eps):
        reports = compare_to_limit(scaled, limit_values, cfg.grid)
        for rep in reports:
            rows.append({
                "eps": eps, "time": rep.time, "component": rep.component,
                "ks": rep.statistic, "threshold": rep.threshold,
                "n_a": rep.n_a, "n_b": rep.n_b, "passed": rep.passed,
            })
    return rows, ""


def _pipeline_checks(cfg: ExperimentConfig, comparison_rows: list[dict],
                     fit, fit_note: str) -> list[dict]:
    checks = []
    if comparison_rows:
        smallest = min(cfg.eps)
        for row in comparison_rows:
            if row["eps"] != smallest:
                continue
            checks.append({
                "name": (f"ks:eps={smallest:g}:t={row['time']:g}"
                         f":c{row['component']}"),
                "passed": bool(row["passed"]),
                "detail": (f"D={row['ks']:.4f} vs "
                           f"threshold {row['threshold']:.4f}"),
            })
    if fit is not None:
        expected = EXPECTED_SLOPE[cfg.pipeline]
        ok = abs(fit.slope - expected) <= SLOPE_TOL
        checks.append({
            "name": "exponent",
            "passed": bool(ok),
            "detail": (f"slope {fit.slope:.4f} vs expected {expected:g} "
                       f"+/- {SLOPE_TOL:g}"),
        })
    elif fit_note:
        checks.append({"name": "exponent", "passed": True,
                       "detail": fit_note})
    return checks


def run_pipeline(cfg: ExperimentConfig) -> PipelineResult:
    """Simulate, sample the limit, compare, fit; write all artifacts."""
    problems = pipeline_spec_problems(cfg)
    if problems:
        raise _bad("spec", "; ".join(problems))
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    flow = build_model(cfg)
    spec = build_spec(cfg, flow)
    estimates = _estimate_parameters(cfg, spec, flow)

    dynamics = _run_dynamics(cfg, spec, flow)
    limit_values, limit_info = _limit_ensemble(cfg, spec, estimates)

    files: list[str] = []
    (outdir / "config.json").write_text(cfg.to_json() + "\n")
    files.append("config.json")

    dyn_info = []
    for idx, (scaled, _sup, info) in enumerate(dynamics):
        name = f"ensemble_eps{idx:02d}.csv"
        write_ensemble_csv(outdir / name, cfg.grid, scaled)
        files.append(name)
        dyn_info.append(info)
    write_ensemble_csv(outdir / "limit_ensemble.csv", cfg.grid, limit_values)
    files.append("limit_ensemble.csv")
    write_estimates_csv(outdir / "estimates.csv", estimates)
    files.append("estimates.csv")

    comparison_rows, compare_note = _comparison_rows(
        cfg, [d[0] for d in dynamics], limit_values)
    write_comparisons_csv(outdir / "comparisons.csv", comparison_rows)
    files.append("comparisons.csv")

    fit = None
    fit_note = ""
    medians = [float(np.median(d[1])) for d in dynamics]
    if len(cfg.eps) >= 3:
        fit = exponent_fit(cfg.eps, [d[1] for d in dynamics],
                           seed=cfg.seed)
        write_exponent_csv(outdir / "exponent_fit.csv", cfg.eps, medians,
                           fit)
        files.append("exponent_fit.csv")
    else:
        fit_note = "exponent fit skipped: needs at least 3 ladder values"

    checks = _pipeline_checks(cfg, comparison_rows, fit, fit_note)
    failed = [c for c in checks if not c["passed"]]
    extra = {
        "command": "pipeline",
        "pipeline": cfg.pipeline,
        "model": cfg.model,
        "eps_ladder": list(cfg.eps),
        "grid": list(cfg.grid),
        "n": cfg.n,
        "n_limit": limit_values.shape[0],
        "master_seed": cfg.seed,
        "estimates": _estimates_meta(estimates),
        "dynamics_info": dyn_info,
        "limit_info": limit_info,
        "median_sup": dict(zip(map(_fmt, cfg.eps), medians)),
        "checks": checks,
        "notes": [n for n in (compare_note, fit_note) if n],
        "wall_seconds": time.perf_counter() - t0,
    }
    if fit is not None:
        extra["exponent_fit"] = {
            "slope": fit.slope, "intercept": fit.intercept,
            "stderr": fit.stderr, "ci_low": fit.ci_low,
            "ci_high": fit.ci_high, "expected": EXPECTED_SLOPE[cfg.pipeline],
        }
    manifest = write_manifest(outdir, files, extra)
    status = 1 if (cfg.strict and failed) else 0
    return PipelineResult(status, outdir, manifest)


# ---------------------------------------------------------------------------
# individual subcommands
# ---------------------------------------------------------------------------


def run_simulate(cfg: ExperimentConfig) -> PipelineResult:
    problems = pipeline_spec_problems(cfg)
    if problems:
        raise _bad("spec", "; ".join(problems))
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    flow = build_model(cfg)
    spec = build_spec(cfg, flow)
    dynamics = _run_dynamics(cfg, spec, flow)
    files = []
    (outdir / "config.json").write_text(cfg.to_json() + "\n")
    files.append("config.json")
    for idx, (scaled, _sup, _info) in enumerate(dynamics):
        name = f"ensemble_eps{idx:02d}.csv"
        write_ensemble_csv(outdir / name, cfg.grid, scaled)
        files.append(name)
    manifest = write_manifest(outdir, files, {
        "command": "simulate", "eps_ladder": list(cfg.eps),
        "pipeline": cfg.pipeline, "master_seed": cfg.seed,
        "dynamics_info": [d[2] for d in dynamics],
    })
    return PipelineResult(0, outdir, manifest)


def run_limit(cfg: ExperimentConfig) -> PipelineResult:
    problems = pipeline_spec_problems(cfg)
    if problems:
        raise _bad("spec", "; ".join(problems))
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    flow = build_model(cfg)
    spec = build_spec(cfg, flow)
    estimates = _estimate_parameters(cfg, spec, flow)
    limit_values, limit_info = _limit_ensemble(cfg, spec, estimates)
    write_ensemble_csv(outdir / "limit_ensemble.csv", cfg.grid, limit_values)
    write_estimates_csv(outdir / "estimates.csv", estimates)
    manifest = write_manifest(
        outdir, ["limit_ensemble.csv", "estimates.csv"], {
            "command": "limit", "pipeline": cfg.pipeline,
            "master_seed": cfg.seed,
            "estimates": _estimates_meta(estimates),
            "limit_info": limit_info,
        })
    return PipelineResult(0, outdir, manifest)


def run_estimate(cfg: ExperimentConfig) -> PipelineResult:
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    flow = build_model(cfg)
    spec = build_spec(cfg, flow)
    estimates = _estimate_parameters(cfg, spec, flow)
    write_estimates_csv(outdir / "estimates.csv", estimates)
    manifest = write_manifest(outdir, ["estimates.csv"], {
        "command": "estimate", "master_seed": cfg.seed,
        "estimates": _estimates_meta(estimates),
    })
    return PipelineResult(0, outdir, manifest)


def run_compare(cfg: ExperimentConfig) -> PipelineResult:
    outdir = Path(cfg.outdir)
    limit_path = outdir / "limit_ensemble.csv"
    if not limit_path.exists():
        raise ConfigError(
            f"{limit_path}: missing; run the 'limit' command first")
    ens_paths = sorted(outdir.glob("ensemble_eps*.csv"))
    if not ens_paths:
        raise ConfigError(
            f"{outdir}: no ensemble_eps*.csv; run 'simulate' first")
    lim_times, limit_values = read_ensemble_csv(limit_path)
    eps_labels = list(cfg.eps) if len(cfg.eps) == len(ens_paths) \
        else list(range(len(ens_paths)))
    ensembles = []
    for label, path in zip(eps_labels, ens_paths):
        times, values = read_ensemble_csv(path)
        if times.shape != lim_times.shape or np.any(times != lim_times):
            raise ConfigError(f"{path}: record times do not match "
                              f"{limit_path}")
        ensembles.append((label, values))
    n_min = min([limit_values.shape[0]] + [v.shape[0] for _, v in ensembles])
    rows = []
    note = ""
    if n_min < 50:
        note = ("comparisons skipped: distribution tests need at least "
                "50 samples per side")
    else:
        for label, values in ensembles:
            reports = compare_to_limit(values, limit_values, lim_times)
            for rep in reports:
                rows.append({
                    "eps": label, "time": rep.time,
                    "component": rep.component,
                    "ks": rep.statistic, "threshold": rep.threshold,
                    "n_a": rep.n_a, "n_b": rep.n_b, "passed": rep.passed,
                })
    write_comparisons_csv(outdir / "comparisons.csv", rows)
    smallest = min(eps_labels)
    checks = [
        {"name": f"ks:eps={row['eps']:g}:t={row['time']:g}"
                 f":c{row['component']}",
         "passed": bool(row["passed"]),
         "detail": f"D={row['ks']:.4f} vs threshold {row['threshold']:.4f}"}
        for row in rows if row["eps"] == smallest
    ]
    manifest = write_manifest(outdir, ["comparisons.csv"], {
        "command": "compare", "checks": checks,
        "notes": [note] if note else [],
    })
    failed = [c for c in checks if not c["passed"]]
    status = 1 if (cfg.strict and failed) else 0
    return PipelineResult(status, outdir, manifest)


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def _parse_eps(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(tok) for tok in text.split(",") if tok.strip())
    except ValueError as exc:
        raise ConfigError(f"--eps: {exc}") from exc
    if not values:
        raise ConfigError("--eps: needs at least one value")
    return values


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slowfastlab",
        description="Simulation laboratory for slow-fast systems driven by "
                    "infinite-measure-preserving fast flows.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "run the slow-dynamics ensembles for each ladder value",
        "limit": "sample the matching limit-law ensemble",
        "estimate": "estimate mean roof, diffusion rate, variance profile",
        "compare": "distribution tests between stored ensembles",
        "pipeline": "simulate + limit + estimate + compare + exponent fit",
        "validate": "static checks on the configuration",
    }
    for name in ("simulate", "limit", "estimate", "compare", "pipeline",
                 "validate"):
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", metavar="PATH",
                       help="JSON experiment config (defaults apply "
                            "when omitted)")
        p.add_argument("--pipeline", choices=PIPELINES,
                       help="which limit theorem the run exercises")
        p.add_argument("--eps", metavar="LIST",
                       help="comma-separated ladder of time-scale ratios")
        p.add_argument("--n", type=int, metavar="INT",
                       help="trajectories per ladder value")
        p.add_argument("--seed", type=int, metavar="INT",
                       help="master seed for all random streams")
        p.add_argument("--jobs", type=int, metavar="INT",
                       help="worker processes (default: machine parallelism)")
        p.add_argument("--out", metavar="DIR",
                       help="artifact directory (env SLOWFAST_OUT overrides)")
        p.add_argument("--strict", action="store_true",
                       help="exit nonzero when any check fails")
    return parser


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config \
        else ExperimentConfig()
    outdir = os.environ.get("SLOWFAST_OUT") or args.out
    return cfg.with_overrides(
        pipeline=args.pipeline,
        eps=_parse_eps(args.eps) if args.eps else None,
        n=args.n,
        seed=args.seed,
        jobs=args.jobs,
        outdir=outdir,
        strict=True if args.strict else None,
    )


def _print_validation(report: ValidationReport) -> None:
    for check in report.checks:
        mark = "PASS" if check.ok else "FAIL"
        print(f"{mark}  {check.name}: {check.detail}")
    print("configuration OK" if report.ok else "configuration has problems")


def _print_result(result: PipelineResult) -> None:
    for name in sorted(result.manifest.get("files", {})):
        print(f"wrote {result.outdir / name}")
    for check in result.manifest.get("checks", []):
        mark = "PASS" if check["passed"] else "FAIL"
        print(f"{mark}  {check['name']}: {check['detail']}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command == "validate":
            report = validate(cfg)
            _print_validation(report)
            return 0 if report.ok else 1
        runner = {
            "simulate": run_simulate,
            "limit": run_limit,
            "estimate": run_estimate,
            "compare": run_compare,
            "pipeline": run_pipeline,
        }[args.command]
        result = runner(cfg)
        _print_result(result)
        return result.exit_status
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
