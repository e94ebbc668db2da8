"""Acceptance suite: twelve desk-scale checks, one test per criterion.

Each test prints one summary line (visible with ``pytest -s``) and enforces
its runtime budget.  Statistical checks use fixed master seeds, so every
tolerance below was verified against an actual margin rather than hoped for.
"""

import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest

from slowfastlab import geometry as G
from slowfastlab import rng
from slowfastlab import slowfast as sf
from slowfastlab.cli import (
    ExperimentConfig,
    build_spec,
    default_spec_json,
    run_pipeline,
)
from slowfastlab.dynsys import (
    TICKS_PER_UNIT,
    BilliardSectionBase,
    BilliardSuspensionAdapter,
    SuspensionFlow,
    ToyDoublingBase,
    to_ticks,
)
from slowfastlab.limitproc import (
    LimitLawParams,
    euler_resolve,
    local_time_at_zero,
    sample_limit_law,
    variation_of_constants,
)
from slowfastlab.slowfast import PathSample, ensemble_displacement
from slowfastlab.stats import (
    estimate_sigma,
    estimate_tau_bar,
    green_kubo,
    ks_two_sample,
)

SEED = 2024


def _finish(num: int, budget: float, t0: float, detail: str) -> None:
    wall = time.perf_counter() - t0
    print(f"[criterion {num:02d}] PASS {wall:7.1f}s "
          f"(budget {budget:g}s): {detail}")
    assert wall <= budget, f"criterion {num} took {wall:.1f}s > {budget}s"


def _random_start(table: G.BilliardTable, gen) -> G.PhasePoint:
    while True:
        qx, qy = float(gen.random()), float(gen.random())
        if not table.contains(qx, qy, tol=-1e-6):
            ang = 2.0 * math.pi * float(gen.random())
            return G.PhasePoint(qx, qy, math.cos(ang), math.sin(ang))


def _reflection_residual(v_in, b: G.BoundaryState) -> float:
    nx, ny = math.cos(b.angle), math.sin(b.angle)
    dot = v_in[0] * nx + v_in[1] * ny
    rx, ry = v_in[0] - 2.0 * dot * nx, v_in[1] - 2.0 * dot * ny
    return math.hypot(rx - b.vx, ry - b.vy)


def test_01_billiard_invariants():
    t0 = time.perf_counter()
    table = G.default_table()

    # speed preservation along one long orbit
    b = G.next_collision(
        G.PhasePoint(0.5, 0.15, math.cos(0.3), math.sin(0.3)), table).boundary
    drift = 0.0
    for _ in range(1000):
        b, _tau = G.collision_map(b, table)
        drift = max(drift, abs(math.hypot(b.vx, b.vy) - 1.0))
    assert drift <= 1e-9, drift

    n_starts = 1000
    orbit_len = 100
    worst_refl = 0.0
    worst_rev = 0.0
    for i in range(n_starts):
        gen = rng.substream(SEED, "accept-geometry", i)
        p = _random_start(table, gen)

        # reflection law at every event of a 100-collision orbit
        ev = G.next_collision(p, table)
        bnd = ev.boundary
        worst_refl = max(worst_refl,
                         _reflection_residual((p.vx, p.vy), bnd))
        seq = [bnd]
        for _ in range(orbit_len - 1):
            nxt, _tau = G.collision_map(bnd, table)
            worst_refl = max(worst_refl,
                             _reflection_residual((bnd.vx, bnd.vy), nxt))
            assert abs(math.hypot(nxt.vx, nxt.vy) - 1.0) <= 1e-9
            seq.append(nxt)
            bnd = nxt

        # lattice equivariance: the shifted orbit replays bitwise
        shifted = G.BoundaryState(seq[0].obstacle_id, seq[0].cell + 3,
                                  seq[0].angle, seq[0].vx, seq[0].vy)
        for k in range(1, orbit_len):
            shifted, _tau = G.collision_map(shifted, table)
            assert shifted.cell == seq[k].cell + 3
            assert shifted.angle == seq[k].angle
            assert (shifted.vx, shifted.vy) == (seq[k].vx, seq[k].vy)

        # time reversal in windows covering a 100-collision stretch
        # (window length keeps hyperbolic roundoff growth under the budget)
        cur = p
        collisions = 0
        while collisions < orbit_len:
            q, events = G.evolve_with_events(cur, 1.5, table)
            back = G.evolve(G.PhasePoint(q.qx, q.qy, -q.vx, -q.vy), 1.5,
                            table)
            err = max(math.hypot(back.qx - cur.qx, back.qy - cur.qy),
                      math.hypot(back.vx + cur.vx, back.vy + cur.vy))
            worst_rev = max(worst_rev, err)
            collisions += len(events)
            cur = q
        assert worst_rev < 1e-6, (i, worst_rev)

    assert worst_refl <= 1e-12, worst_refl
    _finish(1, 60.0, t0,
            f"speed drift {drift:.2e}, reflection residual "
            f"{worst_refl:.2e}, equivariance bitwise, reversal "
            f"{worst_rev:.2e} over {n_starts} starts")


def test_02_suspension_consistency():
    t0 = time.perf_counter()
    base = ToyDoublingBase(0.3)
    flow = SuspensionFlow(base)
    gen = rng.substream(SEED, "accept-suspension", 0)
    horizon_ticks = 20 * TICKS_PER_UNIT
    for i in range(10_000):
        state = base.sample_base(rng.substream(SEED, "accept-susp-state", i))
        p = flow.point(state, cell=int(gen.integers(-3, 4)), height=0.0)
        a = int(gen.integers(0, horizon_ticks))
        c = int(gen.integers(0, horizon_ticks))
        assert flow.flow_ticks(p, a + c) == \
            flow.flow_ticks(flow.flow_ticks(p, a), c)
        t = float(gen.random()) * 50.0
        n = flow.n_t(state, t)
        ticks = to_ticks(t)
        assert flow.t_m_ticks(state, n) <= ticks < flow.t_m_ticks(state, n + 1)

    adapter = BilliardSuspensionAdapter(G.default_table())
    agen = rng.substream(SEED, "accept-adapter", 0)
    worst = 0.0
    for i in range(200):
        state = adapter.base.sample_base(
            rng.substream(SEED, "accept-adapter", i + 1))
        h = float(agen.random()) * 0.9 * adapter.base.tau(state)
        p = adapter.flow.point(state, cell=0, height=h)
        t = float(agen.random()) * 2.0
        via_flow = adapter.flow_phase(p, t)
        direct = G.evolve(adapter.to_phase(p), t, adapter.table)
        worst = max(worst,
                    abs(via_flow.qx - direct.qx), abs(via_flow.qy - direct.qy),
                    abs(via_flow.vx - direct.vx), abs(via_flow.vy - direct.vy))
    assert worst < 1e-8, worst
    _finish(2, 60.0, t0,
            f"semigroup and crossing sandwich exact on 10000 draws, "
            f"adapter agreement {worst:.2e} on 200 draws")


def _random_trig_params(gen, **over) -> sf.TrigFamilyParams:
    kw = dict(
        amp=(float(gen.uniform(0.2, 1.0)), float(gen.uniform(0.0, 0.8)),
             float(gen.uniform(0.5, 2.0)), float(gen.uniform(0.0, 6.0))),
        mean=(float(gen.uniform(-0.3, 0.3)), float(gen.uniform(0.0, 0.5)),
              float(gen.uniform(0.5, 2.0)), float(gen.uniform(0.0, 6.0))),
        base_coeffs=(float(gen.uniform(-0.5, 0.5)),
                     float(gen.uniform(-0.7, 0.7)),
                     float(gen.uniform(-0.7, 0.7))),
        fiber_amp=float(gen.uniform(0.0, 0.5)),
        cell_decay=4.5,
    )
    kw.update(over)
    return sf.TrigFamilyParams(**kw)


def test_03_pathwise_excursion_bound():
    t0 = time.perf_counter()
    toy_flow = SuspensionFlow(ToyDoublingBase(0.3))
    billiard_flow = SuspensionFlow(BilliardSectionBase(G.default_table()))
    gen = rng.substream(SEED, "accept-excursion", 0)
    for k in range(100):
        params = _random_trig_params(gen)
        spec = sf.trig_spec(toy_flow.base, params)
        p0 = toy_flow.sample_point(rng.substream(SEED, "accept-exc-toy", k))
        x0 = float(gen.uniform(-0.5, 0.5))
        rep = sf.gronwall_report(spec, toy_flow, x0, p0, 0.05, 1.0)
        assert rep["ok"], (k, rep)
    for k in range(100):
        params = _random_trig_params(gen, cell_decay=4.0, cell_cutoff=3)
        spec = sf.trig_spec(billiard_flow.base, params, center_n=2000)
        p0 = billiard_flow.sample_point(
            rng.substream(SEED, "accept-exc-billiard", k))
        x0 = float(gen.uniform(-0.5, 0.5))
        rep = sf.gronwall_report(spec, billiard_flow, x0, p0, 0.05, 0.5)
        assert rep["ok"], (k, rep)
    _finish(3, 300.0, t0,
            "pathwise bound held for 100 random forcings/orbits per model")


def test_04_displacement_clt():
    t0 = time.perf_counter()
    flow = SuspensionFlow(ToyDoublingBase(0.3))
    values, _info = ensemble_displacement(flow, 1e-4, 1.0, 10_000, SEED)
    # mean roof is one (the sinusoidal modulation integrates away), so the
    # limit variance per unit flow time is 1/mean_roof = 1
    gauss = rng.substream(SEED, "clt-reference", 0).standard_normal(10_000)
    res = ks_two_sample(values, gauss)
    assert res.passed, (res.statistic, res.threshold)
    _finish(4, 300.0, t0,
            f"D={res.statistic:.4f} below the 95% critical value "
            f"{res.threshold:.4f} at 10000 samples per side")


def test_05_local_time_estimator_mean():
    t0 = time.perf_counter()
    dt = 1e-4
    steps = int(round(1.0 / dt))
    delta = 2.0 * math.sqrt(dt)
    chunk, n_chunks = 2000, 50
    total = 0.0
    first_paths = None
    for j in range(n_chunks):
        gen = rng.substream(SEED, "accept-local-time", j)
        incr = gen.standard_normal((chunk, steps)) * math.sqrt(dt)
        paths = np.cumsum(incr, axis=1)
        # occupation sum over left endpoints; the path starts at 0 (inside)
        inside = np.abs(paths[:, :-1]) <= delta
        occ = (inside.sum(axis=1) + 1) * dt / (2.0 * delta)
        total += float(occ.sum())
        if j == 0:
            first_paths = paths
            first_occ = occ
    mean = total / (chunk * n_chunks)

    # the vectorized sum is the estimator: spot-check against the operation
    times = np.linspace(0.0, 1.0, steps + 1)
    for row in range(3):
        bpath = PathSample(
            times, np.concatenate([[0.0], first_paths[row]])[:, None])
        op_val = float(local_time_at_zero(bpath, delta).values[-1, 0])
        assert op_val == pytest.approx(float(first_occ[row]), rel=1e-9)

    target = math.sqrt(2.0 / math.pi)
    # independent occupation-law oracle: the level-0 clock at time one has
    # the law of |endpoint|, so its mean is sqrt(2/pi)
    oracle = np.abs(
        rng.substream(SEED, "accept-lt-oracle", 0).standard_normal(200_000))
    assert abs(oracle.mean() - target) <= 4.0 * oracle.std() / math.sqrt(
        len(oracle))
    rel_err = abs(mean - target) / target
    assert rel_err < 0.03, (mean, target)
    _finish(5, 300.0, t0,
            f"mean {mean:.5f} vs {target:.5f} (rel err {rel_err:.2%}) "
            f"over 100000 paths")


def _pipeline_ks_rows(outdir: Path) -> list[dict]:
    with open(outdir / "comparisons.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def test_06_integrable_limit_law(tmp_path):
    t0 = time.perf_counter()
    spec = default_spec_json("integrable")
    spec["cell_cutoff"] = 2  # forcing supported near the home cell
    cfg = ExperimentConfig(
        pipeline="integrable", spec=spec, eps=(1e-4,), n=2000, n_limit=2000,
        grid=(0.5, 1.0), seed=SEED, dt_limit=1e-4,
        outdir=str(tmp_path / "integrable"))
    run_pipeline(cfg)
    rows = _pipeline_ks_rows(Path(cfg.outdir))
    assert len(rows) == 2
    worst = max(float(r["ks"]) for r in rows)
    assert worst <= 0.10, rows
    _finish(6, 1800.0, t0,
            f"KS <= {worst:.4f} (tolerance 0.10) at 2000 vs 2000 samples")


def test_07_error_exponents(tmp_path):
    t0 = time.perf_counter()
    slopes = {}
    for pipeline, expected in (("centered", 0.75), ("non-centered", 0.5)):
        cfg = ExperimentConfig(
            pipeline=pipeline, eps=(1e-2, 1e-3, 1e-4, 1e-5), n=500,
            n_limit=500, grid=tuple(np.linspace(0.125, 1.0, 8)), seed=SEED,
            dt_limit=1e-3, outdir=str(tmp_path / pipeline))
        res = run_pipeline(cfg)
        slope = res.manifest["exponent_fit"]["slope"]
        assert abs(slope - expected) <= 0.10, (pipeline, slope)
        slopes[pipeline] = slope
    _finish(7, 2700.0, t0,
            f"slopes {slopes['centered']:.3f} (target 0.75 +/- 0.10) and "
            f"{slopes['non-centered']:.3f} (target 0.50 +/- 0.10), "
            f"500 paths per rung")


def test_08_centered_limit_law(tmp_path):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(
        pipeline="centered", eps=(1e-4,), n=2000, n_limit=2000,
        grid=(0.5, 1.0), seed=SEED, dt_limit=1e-4,
        outdir=str(tmp_path / "centered"))
    res = run_pipeline(cfg)
    gk = res.manifest["estimates"]["green_kubo"]
    assert np.isfinite(gk["tail_bound"]) and gk["tail_bound"] > 0.0
    rows = _pipeline_ks_rows(Path(cfg.outdir))
    worst = max(float(r["ks"]) for r in rows)
    assert worst <= 0.12, rows
    _finish(8, 2700.0, t0,
            f"KS <= {worst:.4f} (tolerance 0.12); variance profile from the "
            f"correlation-sum estimator, truncation bound "
            f"{gk['tail_bound']:.3f}")


def test_09_orbit_integral_limit_law(tmp_path):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(
        pipeline="birkhoff", eps=(1e-4,), n=2000, n_limit=2000,
        grid=(0.5, 1.0), seed=SEED, dt_limit=1e-4,
        outdir=str(tmp_path / "birkhoff"))
    run_pipeline(cfg)
    rows = _pipeline_ks_rows(Path(cfg.outdir))
    worst = max(float(r["ks"]) for r in rows)
    assert worst <= 0.12, rows
    _finish(9, 1800.0, t0,
            f"KS <= {worst:.4f} (tolerance 0.12) at 2000 vs 2000 samples")


def test_10_variation_of_constants_resolution():
    t0 = time.perf_counter()
    params = LimitLawParams(
        tau_bar=1.0, Sigma=1.0,
        a_of=lambda x: np.array([[0.5 + 0.2 * x[0] ** 2]]))
    fbar = lambda x: np.array([0.4 * math.sin(x[0])])     # noqa: E731
    dfbar = lambda x: np.array([[0.4 * math.cos(x[0])]])  # noqa: E731
    dts = (1e-3, 1e-4, 1e-5)
    medians = []
    for dt in dts:
        _vals, info = sample_limit_law(
            params, "centered", 0.1, [0.0, 1.0], 50, 77, fbar=fbar,
            dfbar=dfbar, dt=dt, keep_bundles=True)
        residuals = [
            float(np.max(np.abs(
                euler_resolve(b.V, b.W, dfbar).values - b.Y.values)))
            for b in info["bundles"]]
        medians.append(float(np.median(residuals)))
    rate = float(np.polyfit(np.log(dts), np.log(medians), 1)[0])
    assert rate >= 0.9, (medians, rate)

    # constant generator, constant inhomogeneity: exponential closed form
    c, v = 0.8, 1.3
    t = np.linspace(0.0, 1.0, 2001)
    vpath = PathSample(t, np.full((len(t), 1), v))
    wpath = PathSample(t, np.zeros((len(t), 1)))
    y = variation_of_constants(vpath, wpath, lambda x: np.array([[c]]))
    closed_err = float(np.max(np.abs(y.values[:, 0] - v * np.exp(c * t))))
    assert closed_err <= 1e-6, closed_err
    _finish(10, 120.0, t0,
            f"first-order re-solve rate {rate:.3f} (>= 0.9), closed-form "
            f"error {closed_err:.2e} (<= 1e-6)")


def test_11_parameter_estimators():
    t0 = time.perf_counter()
    flat = SuspensionFlow(ToyDoublingBase(0.0))
    tb_flat = estimate_tau_bar(flat, 500, seed=1)
    assert tb_flat.value == 1.0 and tb_flat.stderr == 0.0

    flow = SuspensionFlow(ToyDoublingBase(0.3))
    tb = estimate_tau_bar(flow, 2000, seed=1)
    assert abs(tb.value - 1.0) <= tb.stderr, (tb.value, tb.stderr)

    sg = estimate_sigma(flow, 2000, 300, seed=2)
    assert abs(sg.value - 1.0) <= 3.0 * sg.stderr, (sg.value, sg.stderr)

    cfg = ExperimentConfig(pipeline="centered")
    spec = build_spec(cfg, flow)
    g1 = green_kubo(spec, flow, cfg.x0, L_max=200, seed=SEED)
    g2 = green_kubo(spec, flow, cfg.x0, L_max=400, seed=SEED)
    assert np.array_equal(g1.value, 0.5 * (g1.value + g1.value.T))
    assert np.linalg.eigvalsh(g1.value).min() >= -1e-12
    doubling = float(abs(g2.value[0, 0] - g1.value[0, 0]))
    assert doubling <= g1.tail_bound, (doubling, g1.tail_bound)
    _finish(11, 600.0, t0,
            f"mean roof {tb.value:.4f} +/- {tb.stderr:.4f}; diffusion rate "
            f"{sg.value:.3f} +/- {sg.stderr:.3f}; correlation sum symmetric "
            f"PSD, lag doubling moved {doubling:.3f} <= bound "
            f"{g1.tail_bound:.3f}")


def test_12_pipeline_determinism(tmp_path):
    t0 = time.perf_counter()
    common = dict(
        pipeline="centered", eps=(1e-1, 3e-2), n=60, n_limit=80,
        grid=(0.5, 1.0), seed=7, dt_limit=1e-2,
        estimators=dict(tau_n=200, sigma_steps=300, sigma_n=80, h_n=200,
                        gk_lags=10, gk_cells=5, gk_n=120))
    cfg1 = ExperimentConfig(outdir=str(tmp_path / "a"), **common)
    cfg2 = ExperimentConfig(outdir=str(tmp_path / "b"), **common)
    run_pipeline(cfg1)
    run_pipeline(cfg2)
    names = sorted(p.name for p in Path(cfg1.outdir).glob("*.csv"))
    assert names
    for name in names:
        b1 = (Path(cfg1.outdir) / name).read_bytes()
        b2 = (Path(cfg2.outdir) / name).read_bytes()
        assert b1 == b2, f"{name} differs between identical runs"
    _finish(12, 300.0, t0,
            f"{len(names)} CSV artifacts byte-identical across reruns")
