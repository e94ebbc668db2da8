"""Slow-fast integrators: perturbed and averaged dynamics, error paths,
Birkhoff-type integrals, and discrete-time comparison systems.

The slow variable obeys dX/dt = f(X, fast state at time t/eps) + fbar(X); the
averaged system drops the fluctuating term.  Integration is fourth-order
Runge-Kutta with steps split exactly at the fast orbit's roof crossings, so
the piecewise-smooth forcing is never interpolated through a discontinuity.
Observables of the fast motion alone are integrated fiber by fiber with
8-node Gauss-Legendre quadrature (the integrand is smooth between crossings),
which is also where the diffusive normalizations T^{-1/2}, T^{-1/4} and the
eps^{1/4} scaling of the slowly-modulated integral enter.

Built-in forcing family
-----------------------
    f(x, (state, cell, s)) = A(x) * w(cell) * u(state, s)
with trigonometric slow dependence A(x) = a0 + a1*sin(a2*x + a3), power-law
cell envelope w(m) = (1+|m|)^(-p) (optionally truncated to |m| <= R), and a
fiber observable u = trig(base coordinate) + optional full-period fiber
profile.  Its fiber means, cell sums, and Lipschitz bounds are available in
closed form, so the estimators and statistical tests have exact targets on
the dyadic base.  The same closed forms let the constant coefficient of u be
shifted so the forcing has zero space average ("centered"); on bases without
closed moments the shift is estimated by Monte Carlo.

Ensemble runners accept a master seed and derive one independent counter
stream per trajectory, so results are reproducible and independent of
execution order; on the dyadic base with the built-in family the inner loops
dispatch to compiled kernels that replay the exact same orbits.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict, replace
from functools import lru_cache
from typing import Any, Callable, Sequence

import numpy as np

from . import rng
from .dynsys import (
    TICKS_PER_UNIT,
    SuspensionFlow,
    SuspensionPoint,
    ToyDoublingBase,
    ToyState,
    SectionState,
    roof_ticks,
    to_ticks,
)

TWO_PI = 2.0 * math.pi
TICK = 2.0 ** -32

# 8-node Gauss-Legendre rule mapped to [0, 1]
_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)
GL_NODES = tuple(0.5 * (x + 1.0) for x in _GL_X)
GL_WEIGHTS = tuple(0.5 * w for w in _GL_W)


class SlowFastError(Exception):
    pass


class StepTooLarge(SlowFastError):
    """dt too coarse to resolve the fast motion between roof crossings."""


class GridMismatch(SlowFastError):
    """Two paths were combined on different time grids."""


@dataclass(frozen=True)
class PathSample:
    """A vector-valued path on a strictly increasing time grid."""

    times: np.ndarray
    values: np.ndarray  # shape (len(times), d)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        if times.ndim != 1 or len(times) == 0:
            raise ValueError("times must be a nonempty 1-d array")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        if len(values) != len(times):
            raise ValueError(
                f"values length {len(values)} != times length {len(times)}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# forcing specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationSpec:
    """Forcing data for the slow equation.

    f(x, point) is the fluctuating term (point a SuspensionPoint whose height
    may be any float under the roof), fbar the offset term, dfbar its
    Jacobian.  cell_weight(m) bounds |f(., .)| on cell m; decay_exponent is
    the margin by which the weighted cell sum must converge (see
    envelope_weight_sum).  centered means the invariant-measure average of
    f(x, .) vanishes for every x.  Optional analytic extras: d1f (derivative
    of f in x, same call signature) and lip_x(point), a pointwise bound on
    the x-Lipschitz constant of f(., point) + fbar.
    """

    f: Callable[[np.ndarray, SuspensionPoint], np.ndarray]
    fbar: Callable[[np.ndarray], np.ndarray]
    dfbar: Callable[[np.ndarray], np.ndarray]
    decay_exponent: float
    cell_weight: Callable[[int], float]
    centered: bool
    dim: int = 1
    d1f: Callable[[np.ndarray, SuspensionPoint], np.ndarray] | None = None
    lip_x: Callable[[SuspensionPoint], float] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.decay_exponent > 0):
            raise ValueError(
                f"decay_exponent must be positive, got {self.decay_exponent}")
        if self.dim < 1:
            raise ValueError("dim must be at least 1")


def envelope_weight_sum(spec: PerturbationSpec, tol: float = 1e-12,
                        max_cells: int = 200_000) -> float:
    """Sum of (1+|m|)^(2*(1+decay_exponent)) * cell_weight(m) over all cells.

    This weighted sum must be finite for the centered error theory to apply;
    cells are accumulated outward from zero until the terms fall below tol
    relative to the running total and a doubled-distance probe confirms the
    decay.  Raises SlowFastError if no convergence is seen by max_cells.
    """
    expo = 2.0 * (1.0 + spec.decay_exponent)
    total = spec.cell_weight(0)
    m = 1
    while m <= max_cells:
        term = (1.0 + m) ** expo * (spec.cell_weight(m) + spec.cell_weight(-m))
        total += term
        if term <= tol * max(total, 1.0):
            probe = (1.0 + 2 * m) ** expo * (
                spec.cell_weight(2 * m) + spec.cell_weight(-2 * m))
            if probe <= term + tol:
                return total
        m += 1
    raise SlowFastError(
        f"weighted cell envelope has not converged after {max_cells} cells; "
        "the forcing decays too slowly across cells for the centered theory")


def centering_residual(spec: PerturbationSpec, flow: SuspensionFlow,
                       x: np.ndarray | float, n: int = 4000, seed: int = 2024,
                       max_cells: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo mean and stderr (componentwise) of the space average of f(x, .).

    The average runs over the invariant measure of the suspension: base
    states from the base law, all integer cells, and the fiber coordinate
    integrated exactly along each roof.  A centered spec should come out
    within a few stderr of zero.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    gen = rng.substream(seed, "centering", 0)
    Ffun = F_of(spec, flow.base)
    cells = [m for m in range(-max_cells, max_cells + 1)
             if spec.cell_weight(m) != 0.0]
    samples = np.empty((n, spec.dim))
    for i in range(n):
        state = flow.base.sample_base(gen)
        acc = np.zeros(spec.dim)
        for m in cells:
            acc += Ffun(x, state, m)
        samples[i] = acc
    mean = samples.mean(axis=0)
    stderr = samples.std(axis=0, ddof=1) / math.sqrt(n)
    return mean, stderr


# ---------------------------------------------------------------------------
# built-in trigonometric family
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrigFamilyParams:
    """Parameters of the built-in forcing family (scalar slow variable).

    amp  = (a0, a1, a2, a3):     slow factor A(x) = a0 + a1*sin(a2*x + a3)
    mean = (g0, g1, g2, g3):     offset term fbar(x) = g0 + g1*sin(g2*x + g3)
    base_coeffs = (b0, b1, b2):  fiber observable b0 + b1*cos(2 pi theta)
                                 + b2*sin(2 pi theta) in the base coordinate
    fiber_amp:                   amplitude of the full-period fiber profile
                                 sin(2 pi s / roof), which has zero fiber mean
    cell_decay:                  envelope exponent p in w(m) = (1+|m|)^(-p)
    cell_cutoff:                 optional hard truncation to |m| <= cutoff
    decay_exponent:              admissibility margin; with infinite cell
                                 support, cell_decay must exceed
                                 2*(1+decay_exponent)+1
    """

    amp: tuple[float, float, float, float] = (1.0, 0.5, 1.0, 0.0)
    mean: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    base_coeffs: tuple[float, float, float] = (0.0, 0.0, 1.0)
    fiber_amp: float = 0.0
    cell_decay: float = 4.5
    cell_cutoff: int | None = None
    decay_exponent: float = 0.25

    def __post_init__(self):
        if len(self.amp) != 4 or len(self.mean) != 4 or len(self.base_coeffs) != 3:
            raise ValueError("amp and mean need 4 coefficients, base_coeffs 3")
        if not (self.decay_exponent > 0):
            raise ValueError("decay_exponent must be positive")
        if self.cell_cutoff is None:
            needed = 2.0 * (1.0 + self.decay_exponent) + 1.0
            if not (self.cell_decay > needed):
                raise ValueError(
                    "infinite cell support needs cell_decay > "
                    f"2*(1+decay_exponent)+1 = {needed}, got {self.cell_decay}")
        elif self.cell_cutoff < 0:
            raise ValueError("cell_cutoff must be None or a nonnegative integer")

    def to_json(self) -> dict:
        d = asdict(self)
        d["family"] = "trig_cell"
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrigFamilyParams":
        obj = dict(obj)
        fam = obj.pop("family", "trig_cell")
        if fam != "trig_cell":
            raise ValueError(f"unknown forcing family {fam!r}")
        for key in ("amp", "mean", "base_coeffs"):
            if key in obj:
                obj[key] = tuple(float(v) for v in obj[key])
        if obj.get("cell_cutoff") is not None:
            obj["cell_cutoff"] = int(obj["cell_cutoff"])
        return cls(**obj)


def base_coordinate(state: Any) -> float:
    """A scalar coordinate of a base state, lying in [0, 1).

    Dyadic states expose their register as a point of the unit interval;
    collision-section states use the normalized boundary angle.
    """
    if isinstance(state, ToyState):
        return state.x
    if isinstance(state, SectionState):
        return (state.angle / TWO_PI) % 1.0
    raise TypeError(f"no scalar coordinate defined for {type(state).__name__}")


def cell_weight_fn(params: TrigFamilyParams) -> Callable[[int], float]:
    p = params.cell_decay
    cutoff = params.cell_cutoff

    def w(m: int) -> float:
        if cutoff is not None and abs(m) > cutoff:
            return 0.0
        return (1.0 + abs(m)) ** (-p)

    if cutoff is None:
        w.decay_power = p  # lets estimators bound tails in closed form
    return w


def cell_weight_sum(params: TrigFamilyParams, tol: float = 1e-14) -> float:
    """Sum of the cell envelope w(m) over all integer cells."""
    if params.cell_cutoff is not None:
        w = cell_weight_fn(params)
        return float(sum(w(m) for m in range(-params.cell_cutoff,
                                             params.cell_cutoff + 1)))
    p = params.cell_decay
    total = 1.0
    m = 1
    while True:
        total += 2.0 * (1.0 + m) ** (-p)
        # integral bound on the remaining decreasing tail
        tail = 2.0 * (1.0 + m) ** (1.0 - p) / (p - 1.0)
        if tail < tol * total:
            return total
        m += 1


def trig_fiber_mean(base, params: TrigFamilyParams, n: int = 20000,
                    seed: int = 11) -> tuple[float, float]:
    """Mean (and stderr) of roof * fiber observable under the base law.

    On the dyadic base the coordinate is uniform and the roof is
    1 + alpha*sin(2 pi theta), so the mean is b0 + alpha*b2/2 in closed form
    (stderr 0).  Other bases fall back to Monte Carlo.
    """
    b0, b1, b2 = params.base_coeffs
    if isinstance(base, ToyDoublingBase):
        return b0 + base.alpha * b2 / 2.0, 0.0
    gen = rng.substream(seed, "fiber-mean", 0)
    vals = np.empty(n)
    for i in range(n):
        state = base.sample_base(gen)
        theta = base_coordinate(state)
        obs = b0 + b1 * math.cos(TWO_PI * theta) + b2 * math.sin(TWO_PI * theta)
        vals[i] = base.tau(state) * obs
    return float(np.mean(vals)), float(np.std(vals, ddof=1) / math.sqrt(n))


def trig_mean_roof(base, n: int = 20000, seed: int = 12) -> tuple[float, float]:
    """Mean roof (and stderr) under the base law; closed form on the dyadic base."""
    if isinstance(base, ToyDoublingBase):
        return 1.0, 0.0
    gen = rng.substream(seed, "mean-roof", 0)
    vals = np.empty(n)
    for i in range(n):
        vals[i] = base.tau(base.sample_base(gen))
    return float(np.mean(vals)), float(np.std(vals, ddof=1) / math.sqrt(n))


def trig_spec(base, params: TrigFamilyParams, *, center: bool = False,
              center_n: int = 20000, center_seed: int = 11) -> PerturbationSpec:
    """Build a PerturbationSpec for the trigonometric family over `base`.

    With center=True the constant coefficient b0 of the fiber observable is
    shifted so that roof * observable has zero base-law mean — in closed form
    on the dyadic base, by Monte Carlo elsewhere (subtracting the estimated
    mean and recording the shift in meta).  The fiber-profile term always
    integrates to zero over a full roof, so this makes the whole forcing
    average to zero over the invariant measure.
    """
    b0, b1, b2 = (float(v) for v in params.base_coeffs)
    center_info: dict[str, Any] = {"mode": None}
    if center:
        if isinstance(base, ToyDoublingBase):
            b0 = -base.alpha * b2 / 2.0
            center_info = {"mode": "closed-form"}
        else:
            shifted = replace(params, base_coeffs=(b0, b1, b2))
            num, num_err = trig_fiber_mean(base, shifted, n=center_n,
                                           seed=center_seed)
            den, _ = trig_mean_roof(base, n=center_n, seed=center_seed + 1)
            shift = num / den
            b0 -= shift
            center_info = {"mode": "monte-carlo", "shift": shift,
                           "stderr": num_err / den, "n": center_n,
                           "seed": center_seed}
    eff = replace(params, base_coeffs=(b0, b1, b2))
    fiber_mean, fiber_mean_err = trig_fiber_mean(base, eff, n=center_n,
                                                 seed=center_seed)
    if isinstance(base, ToyDoublingBase):
        centered = fiber_mean == 0.0
    else:
        centered = bool(center)
    return _build_trig_spec(base, eff, centered, fiber_mean, fiber_mean_err,
                            center_info)


def _build_trig_spec(base, params: TrigFamilyParams, centered: bool,
                     fiber_mean: float, fiber_mean_err: float,
                     center_info: dict) -> PerturbationSpec:
    a0, a1, a2, a3 = (float(v) for v in params.amp)
    g0, g1, g2, g3 = (float(v) for v in params.mean)
    b0, b1, b2 = (float(v) for v in params.base_coeffs)
    q = float(params.fiber_amp)
    w = cell_weight_fn(params)

    @lru_cache(maxsize=512)
    def tau_of(state):
        return base.tau(state)

    def f(x, point: SuspensionPoint) -> np.ndarray:
        wm = w(point.cell)
        if wm == 0.0:
            return np.zeros(1)
        theta = base_coordinate(point.state)
        u = b0 + b1 * math.cos(TWO_PI * theta) + b2 * math.sin(TWO_PI * theta)
        if q != 0.0:
            u = u + q * math.sin(TWO_PI * point.height / tau_of(point.state))
        a = a0 + a1 * math.sin(a2 * x[0] + a3)
        return np.array([a * wm * u])

    def fbar(x) -> np.ndarray:
        return np.array([g0 + g1 * math.sin(g2 * x[0] + g3)])

    def dfbar(x) -> np.ndarray:
        return np.array([[g1 * g2 * math.cos(g2 * x[0] + g3)]])

    def d1f(x, point: SuspensionPoint) -> np.ndarray:
        wm = w(point.cell)
        if wm == 0.0:
            return np.zeros((1, 1))
        theta = base_coordinate(point.state)
        u = b0 + b1 * math.cos(TWO_PI * theta) + b2 * math.sin(TWO_PI * theta)
        if q != 0.0:
            u = u + q * math.sin(TWO_PI * point.height / tau_of(point.state))
        da = a1 * a2 * math.cos(a2 * x[0] + a3)
        return np.array([[da * wm * u]])

    lip_amp = abs(a1 * a2)
    lip_mean = abs(g1 * g2)

    def lip_x(point: SuspensionPoint) -> float:
        wm = w(point.cell)
        if wm == 0.0:
            return lip_mean
        theta = base_coordinate(point.state)
        u = b0 + b1 * math.cos(TWO_PI * theta) + b2 * math.sin(TWO_PI * theta)
        if q != 0.0:
            u = u + q * math.sin(TWO_PI * point.height / tau_of(point.state))
        return lip_amp * wm * abs(u) + lip_mean

    meta = {
        "family": "trig_cell",
        "params": params.to_json(),
        "base": type(base).__name__,
        "fiber_mean": fiber_mean,
        "fiber_mean_stderr": fiber_mean_err,
        "weight_sum": cell_weight_sum(params),
        "center": center_info,
    }
    if isinstance(base, ToyDoublingBase):
        meta["alpha"] = base.alpha
    return PerturbationSpec(
        f=f, fbar=fbar, dfbar=dfbar,
        decay_exponent=params.decay_exponent,
        cell_weight=w, centered=centered, dim=1,
        d1f=d1f, lip_x=lip_x, meta=meta)


def trig_params_of(spec: PerturbationSpec) -> TrigFamilyParams:
    if spec.meta.get("family") != "trig_cell":
        raise SlowFastError("spec was not built from the trigonometric family")
    return TrigFamilyParams.from_json(spec.meta["params"])


def trig_nu_mean(spec: PerturbationSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Space average h(x) of f(x, .) over the invariant measure, in closed form.

    For the factorized family this is A(x) * (cell weight sum) * (fiber mean
    of roof * observable).  The fiber mean is exact on the dyadic base and a
    stored Monte Carlo estimate elsewhere.
    """
    params = trig_params_of(spec)
    a0, a1, a2, a3 = params.amp
    scale = spec.meta["weight_sum"] * spec.meta["fiber_mean"]

    def h(x) -> np.ndarray:
        return np.array([(a0 + a1 * math.sin(a2 * x[0] + a3)) * scale])

    return h


def trig_kernel_params(spec: PerturbationSpec) -> np.ndarray:
    """Flat parameter vector consumed by the compiled dyadic-base kernels."""
    params = trig_params_of(spec)
    cutoff = -1.0 if params.cell_cutoff is None else float(params.cell_cutoff)
    return np.array([*params.amp, *params.mean, *params.base_coeffs,
                     params.fiber_amp, params.cell_decay, cutoff], dtype=float)


def spec_to_json(spec: PerturbationSpec) -> dict:
    """JSON description (family name + parameters) of a built-in-family spec."""
    params = trig_params_of(spec)
    out = params.to_json()
    out["centered"] = spec.centered
    out["center_mode"] = spec.meta.get("center", {}).get("mode")
    return out


def spec_from_json(obj: dict, base) -> PerturbationSpec:
    """Rebuild a built-in-family spec from its JSON description over `base`."""
    obj = dict(obj)
    obj.pop("centered", None)
    mode = obj.pop("center_mode", None)
    params = TrigFamilyParams.from_json(obj)
    return trig_spec(base, params, center=mode is not None)


# ---------------------------------------------------------------------------
# fiber integral of the forcing
# ---------------------------------------------------------------------------


def F_of(spec: PerturbationSpec, base):
    """Fiber integral of the forcing over one roof.

    Returns a callable F(x, state, cell) = integral over s in [0, roof] of
    f(x, (state, cell, s)), by 8-node Gauss-Legendre quadrature (the
    integrand is smooth along a fiber).  If the forcing carries d1f, the same
    quadrature of the x-derivative is exposed as the attribute F.d1.
    """
    f = spec.f
    dim = spec.dim

    @lru_cache(maxsize=512)
    def tau_of(state):
        return base.tau(state)

    def F(x, state, cell: int) -> np.ndarray:
        tau = tau_of(state)
        acc = np.zeros(dim)
        for node, wt in zip(GL_NODES, GL_WEIGHTS):
            s = node * tau
            acc += (wt * tau) * f(x, SuspensionPoint(state, cell,
                                                     s * TICKS_PER_UNIT))
        return acc

    if spec.d1f is not None:
        d1f = spec.d1f

        def d1(x, state, cell: int) -> np.ndarray:
            tau = tau_of(state)
            acc = np.zeros((dim, dim))
            for node, wt in zip(GL_NODES, GL_WEIGHTS):
                s = node * tau
                acc += (wt * tau) * d1f(x, SuspensionPoint(state, cell,
                                                           s * TICKS_PER_UNIT))
            return acc

        F.d1 = d1
    return F


# ---------------------------------------------------------------------------
# integrators
# ---------------------------------------------------------------------------


def _prep_grid(S: float, record_times) -> np.ndarray:
    if not (S > 0):
        raise ValueError(f"horizon S must be positive, got {S}")
    if record_times is None:
        return np.linspace(0.0, S, 129)
    grid = np.asarray(record_times, dtype=float)
    if grid.ndim != 1 or len(grid) == 0:
        raise ValueError("record grid must be a nonempty 1-d array")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("record grid must be strictly increasing")
    if grid[0] < 0.0 or grid[-1] > S * (1.0 + 1e-12):
        raise ValueError("record grid must lie within [0, S]")
    return np.minimum(grid, S)


def _check_dt(dt: float, eps: float, inf_tau: float) -> None:
    if not (dt > 0):
        raise ValueError(f"dt must be positive, got {dt}")
    limit = eps * inf_tau / 4.0
    if dt > limit * (1.0 + 1e-12):
        raise StepTooLarge(
            f"dt={dt} cannot resolve the fast motion: need dt <= "
            f"eps*inf_roof/4 = {limit}")


def integrate_perturbed(spec: PerturbationSpec, flow: SuspensionFlow,
                        x0, point: SuspensionPoint, eps: float, S: float,
                        dt: float, record_times=None) -> PathSample:
    """Fourth-order path of the slow variable driven by the fast orbit.

    Steps are split exactly at the roof-crossing times of the fast orbit (and
    at record times), so every Runge-Kutta substep sees a smooth right-hand
    side; within a fiber the fast point advances linearly in height.  The
    step dt must resolve the shortest fiber: dt <= eps * inf_roof / 4.
    """
    if not (eps > 0):
        raise ValueError(f"eps must be positive, got {eps}")
    base = flow.base
    _check_dt(dt, eps, base.inf_tau)
    grid = _prep_grid(S, record_times)
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    if x.shape != (spec.dim,):
        raise ValueError(f"x0 must have {spec.dim} components, got {x.shape}")
    f, fbar = spec.f, spec.fbar

    state, cell = point.state, point.cell
    nxt, dphi, tau_cur = base.step_with_data(state)
    tau_t = roof_ticks(tau_cur)
    s_base = point.height_ticks * TICK  # fiber coordinate when this fiber began counting
    t_enter = 0.0
    t_cross = t_enter + eps * (tau_t * TICK - s_base)

    n_rec = len(grid)
    out = np.empty((n_rec, spec.dim))
    ri = 0
    while ri < n_rec and grid[ri] <= 0.0:
        out[ri] = x
        ri += 1
    tcur = 0.0
    while ri < n_rec or tcur < S:
        t_stop = grid[ri] if ri < n_rec else S
        t_end = t_cross if t_cross < t_stop else t_stop
        seg = t_end - tcur
        if seg > 0.0:
            nsub = int(math.ceil(seg / dt - 1e-9))
            if nsub < 1:
                nsub = 1
            h = seg / nsub
            sb = s_base + (tcur - t_enter) / eps
            hs = h / eps
            for _ in range(nsub):
                s_mid = sb + 0.5 * hs
                s_end = sb + hs
                p1 = SuspensionPoint(state, cell, sb * TICKS_PER_UNIT)
                pm = SuspensionPoint(state, cell, s_mid * TICKS_PER_UNIT)
                p4 = SuspensionPoint(state, cell, s_end * TICKS_PER_UNIT)
                k1 = f(x, p1) + fbar(x)
                xa = x + (0.5 * h) * k1
                k2 = f(xa, pm) + fbar(xa)
                xb = x + (0.5 * h) * k2
                k3 = f(xb, pm) + fbar(xb)
                xc = x + h * k3
                k4 = f(xc, p4) + fbar(xc)
                x = x + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
                sb = s_end
        tcur = t_end
        if t_end == t_cross:
            state = nxt
            cell += dphi
            nxt, dphi, tau_cur = base.step_with_data(state)
            tau_t = roof_ticks(tau_cur)
            t_enter = t_cross
            s_base = 0.0
            t_cross = t_enter + eps * (tau_t * TICK - s_base)
        if ri < n_rec and t_end == grid[ri]:
            out[ri] = x
            ri += 1
        if ri >= n_rec and tcur >= S:
            break
    return PathSample(grid, out, meta={
        "kind": "perturbed", "eps": eps, "dt": dt,
        "model": type(base).__name__})


def integrate_averaged(fbar: Callable, x0, S: float, dt: float,
                       record_times=None) -> PathSample:
    """Fourth-order path of the averaged equation dW/dt = fbar(W)."""
    if not (dt > 0):
        raise ValueError(f"dt must be positive, got {dt}")
    grid = _prep_grid(S, record_times)
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    n_rec = len(grid)
    out = np.empty((n_rec, len(x)))
    ri = 0
    while ri < n_rec and grid[ri] <= 0.0:
        out[ri] = x
        ri += 1
    tcur = 0.0
    boundaries = list(grid[ri:])
    if not boundaries or boundaries[-1] < S:
        boundaries.append(S)
    for t_end in boundaries:
        seg = t_end - tcur
        if seg > 0.0:
            nsub = int(math.ceil(seg / dt - 1e-9))
            if nsub < 1:
                nsub = 1
            h = seg / nsub
            for _ in range(nsub):
                k1 = fbar(x)
                k2 = fbar(x + (0.5 * h) * k1)
                k3 = fbar(x + (0.5 * h) * k2)
                k4 = fbar(x + h * k3)
                x = x + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        tcur = t_end
        if ri < n_rec and t_end == grid[ri]:
            out[ri] = x
            ri += 1
    return PathSample(grid, out, meta={"kind": "averaged", "dt": dt})


def error_path(xpath: PathSample, wpath: PathSample, exponent: float,
               eps: float) -> PathSample:
    """Scaled difference eps^(-exponent) * (perturbed - averaged) on one grid."""
    if xpath.times.shape != wpath.times.shape or np.any(
            xpath.times != wpath.times):
        raise GridMismatch("error path needs both inputs on the same time grid")
    if xpath.values.shape != wpath.values.shape:
        raise GridMismatch(
            f"value shapes differ: {xpath.values.shape} vs {wpath.values.shape}")
    scale = float(eps) ** (-float(exponent))
    meta = {"kind": "error", "exponent": float(exponent), "eps": float(eps)}
    return PathSample(xpath.times.copy(),
                      (xpath.values - wpath.values) * scale, meta)


# ---------------------------------------------------------------------------
# orbit integrals
# ---------------------------------------------------------------------------


def _norm_exponent(normalization) -> float:
    if normalization in (None, "none"):
        return 0.0
    if normalization == "quarter":
        return 0.25
    if normalization == "half":
        return 0.5
    return float(normalization)


def birkhoff_integral(flow: SuspensionFlow, g: Callable, point: SuspensionPoint,
                      T: float | None = None, normalization="none",
                      times=None, fiber_constant: bool = False,
                      subdiv: int = 1):
    """Integral of g along the fast orbit, with optional diffusive scaling.

    Walks the orbit fiber by fiber; each smooth piece is integrated with an
    8-node Gauss-Legendre rule (subdiv sub-segments per piece), or, when
    fiber_constant=True, by value * length with g evaluated once per piece
    (exact whenever g does not depend on the fiber coordinate).  With scalar
    T the scaled value at time T is returned (float for scalar g); with a
    `times` grid, a PathSample of the running integral, each entry scaled by
    its own time.  normalization: "none", "quarter" (T^-1/4), "half"
    (T^-1/2), or a numeric exponent.
    """
    if times is None:
        if T is None or not (T > 0):
            raise ValueError("need a positive horizon T")
        targets = np.array([float(T)])
    else:
        targets = np.asarray(times, dtype=float)
        if targets.ndim != 1 or len(targets) == 0:
            raise ValueError("times must be a nonempty 1-d array")
        if np.any(np.diff(targets) <= 0) or targets[0] < 0:
            raise ValueError("times must be nonnegative and strictly increasing")
    expo = _norm_exponent(normalization)
    base = flow.base
    state, cell = point.state, point.cell
    nxt, dphi, tau_cur = base.step_with_data(state)
    tau_f = roof_ticks(tau_cur) * TICK
    s_cur = point.height_ticks * TICK
    t_glob = 0.0

    first = np.atleast_1d(np.asarray(
        g(SuspensionPoint(state, cell, point.height_ticks)), dtype=float))
    d = first.shape[0]
    cum = np.zeros(d)

    def piece(a: float, b: float) -> np.ndarray:
        if b <= a:
            return np.zeros(d)
        if fiber_constant:
            val = np.atleast_1d(np.asarray(
                g(SuspensionPoint(state, cell, a * TICKS_PER_UNIT)), dtype=float))
            return (b - a) * val
        acc = np.zeros(d)
        L = (b - a) / subdiv
        for j in range(subdiv):
            lo = a + j * L
            for node, wt in zip(GL_NODES, GL_WEIGHTS):
                s = lo + node * L
                val = np.atleast_1d(np.asarray(
                    g(SuspensionPoint(state, cell, s * TICKS_PER_UNIT)),
                    dtype=float))
                acc += (wt * L) * val
        return acc

    vals = np.empty((len(targets), d))
    for i, tgt in enumerate(targets):
        while t_glob + (tau_f - s_cur) <= tgt:
            cum += piece(s_cur, tau_f)
            t_glob += tau_f - s_cur
            state = nxt
            cell += dphi
            nxt, dphi, tau_cur = base.step_with_data(state)
            tau_f = roof_ticks(tau_cur) * TICK
            s_cur = 0.0
        rem = tgt - t_glob
        if rem > 0.0:
            cum += piece(s_cur, s_cur + rem)
            s_cur += rem
            t_glob = tgt
        factor = 1.0 if expo == 0.0 else (0.0 if tgt <= 0.0 else tgt ** (-expo))
        vals[i] = cum * factor
    if times is None:
        return float(vals[0, 0]) if d == 1 else vals[0]
    return PathSample(targets, vals, meta={
        "kind": "orbit-integral", "normalization": expo})


def perturbed_birkhoff(spec: PerturbationSpec, flow: SuspensionFlow,
                       point: SuspensionPoint, eps: float, times,
                       x0=0.0, subdiv: int = 1) -> PathSample:
    """eps^(1/4)-scaled orbit integral of the forcing with moving slow argument.

    Computes eps^(1/4) * integral over s in [0, t/eps] of f(x(s), orbit(s))
    with the slow argument gliding along the diagonal x(s) = x0 + eps*s in
    every component, sampled on the given slow-time grid.
    """
    if not (eps > 0):
        raise ValueError(f"eps must be positive, got {eps}")
    grid = np.asarray(times, dtype=float)
    if grid.ndim != 1 or len(grid) == 0:
        raise ValueError("times must be a nonempty 1-d array")
    if np.any(np.diff(grid) <= 0) or grid[0] < 0:
        raise ValueError("times must be nonnegative and strictly increasing")
    targets = grid / eps
    base = flow.base
    f = spec.f
    xbase = np.atleast_1d(np.asarray(x0, dtype=float))
    if xbase.shape != (spec.dim,):
        raise ValueError(f"x0 must have {spec.dim} components")
    state, cell = point.state, point.cell
    nxt, dphi, tau_cur = base.step_with_data(state)
    tau_f = roof_ticks(tau_cur) * TICK
    s_cur = point.height_ticks * TICK
    t_glob = 0.0
    cum = np.zeros(spec.dim)
    scale = eps ** 0.25

    def piece(a: float, b: float) -> np.ndarray:
        # local fiber coords [a, b]; global fast time offset t_glob - a... the
        # node's global time is t_glob + (s - a) for s in [a, b]
        if b <= a:
            return np.zeros(spec.dim)
        acc = np.zeros(spec.dim)
        L = (b - a) / subdiv
        for j in range(subdiv):
            lo = a + j * L
            for node, wt in zip(GL_NODES, GL_WEIGHTS):
                s = lo + node * L
                sg = t_glob + (s - a)
                xval = xbase + eps * sg
                acc += (wt * L) * f(xval, SuspensionPoint(
                    state, cell, s * TICKS_PER_UNIT))
        return acc

    vals = np.empty((len(grid), spec.dim))
    for i, tgt in enumerate(targets):
        while t_glob + (tau_f - s_cur) <= tgt:
            cum += piece(s_cur, tau_f)
            t_glob += tau_f - s_cur
            state = nxt
            cell += dphi
            nxt, dphi, tau_cur = base.step_with_data(state)
            tau_f = roof_ticks(tau_cur) * TICK
            s_cur = 0.0
        rem = tgt - t_glob
        if rem > 0.0:
            cum += piece(s_cur, s_cur + rem)
            s_cur += rem
            t_glob = tgt
        vals[i] = scale * cum
    return PathSample(grid, vals, meta={
        "kind": "perturbed-orbit-integral", "eps": eps})


# ---------------------------------------------------------------------------
# discrete comparison systems
# ---------------------------------------------------------------------------


def discrete_comparison(spec: PerturbationSpec, flow: SuspensionFlow, x0,
                        point: SuspensionPoint, eps: float, S: float,
                        dt: float | None = None,
                        record_times=None) -> tuple[PathSample, PathSample]:
    """Piecewise-frozen comparison systems on slow time.

    On each block [k*eps, (k+1)*eps) the fast point is frozen at the k-th
    base iterate of the starting state: the first returned path moves with
    the fiber-integrated forcing F(x, iterate) plus roof(iterate)*fbar(x),
    the second with the roof-scaled offset alone.  Both start at x0.
    """
    if not (eps > 0):
        raise ValueError(f"eps must be positive, got {eps}")
    base = flow.base
    if dt is None:
        dt = eps * base.inf_tau / 4.0
    _check_dt(dt, eps, base.inf_tau)
    grid = _prep_grid(S, record_times)
    Ffun = F_of(spec, base)
    fbar = spec.fbar
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    wv = x.copy()
    state, cell = point.state, point.cell
    tau_q = roof_ticks(base.tau(state)) * TICK
    k_blk = 0

    n_rec = len(grid)
    outx = np.empty((n_rec, spec.dim))
    outw = np.empty((n_rec, spec.dim))
    ri = 0
    while ri < n_rec and grid[ri] <= 0.0:
        outx[ri] = x
        outw[ri] = wv
        ri += 1
    tcur = 0.0
    while ri < n_rec or tcur < S:
        t_blk_end = (k_blk + 1) * eps
        t_stop = grid[ri] if ri < n_rec else S
        t_end = t_blk_end if t_blk_end < t_stop else t_stop
        seg = t_end - tcur
        if seg > 0.0:
            nsub = int(math.ceil(seg / dt - 1e-9))
            if nsub < 1:
                nsub = 1
            h = seg / nsub
            for _ in range(nsub):
                k1 = Ffun(x, state, cell) + tau_q * fbar(x)
                xa = x + (0.5 * h) * k1
                k2 = Ffun(xa, state, cell) + tau_q * fbar(xa)
                xb = x + (0.5 * h) * k2
                k3 = Ffun(xb, state, cell) + tau_q * fbar(xb)
                xc = x + h * k3
                k4 = Ffun(xc, state, cell) + tau_q * fbar(xc)
                x = x + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
                m1 = tau_q * fbar(wv)
                wa = wv + (0.5 * h) * m1
                m2 = tau_q * fbar(wa)
                wb = wv + (0.5 * h) * m2
                m3 = tau_q * fbar(wb)
                wc = wv + h * m3
                m4 = tau_q * fbar(wc)
                wv = wv + (h / 6.0) * (m1 + 2.0 * (m2 + m3) + m4)
        tcur = t_end
        if t_end == t_blk_end:
            state, dphi, _tau = base.step_with_data(state)
            cell += dphi
            tau_q = roof_ticks(base.tau(state)) * TICK
            k_blk += 1
        if ri < n_rec and t_end == grid[ri]:
            outx[ri] = x
            outw[ri] = wv
            ri += 1
        if ri >= n_rec and tcur >= S:
            break
    meta = {"kind": "discrete-comparison", "eps": eps, "dt": dt}
    return (PathSample(grid, outx, meta),
            PathSample(grid, outw, {**meta, "offset_only": True}))


def discrete_gap_report(spec: PerturbationSpec, flow: SuspensionFlow, x0,
                        point: SuspensionPoint, eps: float, S: float,
                        dt: float | None = None, n_check: int = 33) -> dict:
    """Sup-norm gap between the flow-driven path and the time-changed
    comparison path.

    Evaluates the perturbed path at grid times t and the first comparison
    path at eps * (number of roof crossings before t/eps), both from the same
    starting data; the gap should shrink linearly in eps.
    """
    base = flow.base
    if dt is None:
        dt = eps * base.inf_tau / 4.0
    grid = np.linspace(0.0, S, n_check)
    xp = integrate_perturbed(spec, flow, x0, point, eps, S, dt,
                             record_times=grid)
    ns = np.array([flow.n_t(point.state, t / eps) for t in grid], dtype=float)
    t_disc = eps * ns
    horizon = float(max(S, t_disc.max(), eps))
    uniq = np.unique(t_disc)
    xt, _wt = discrete_comparison(spec, flow, x0, point, eps, horizon, dt,
                                  record_times=uniq)
    index = {t: i for i, t in enumerate(xt.times)}
    gaps = np.array([
        np.linalg.norm(xp.values[j] - xt.values[index[t_disc[j]]])
        for j in range(len(grid))])
    return {"gap": float(gaps.max()), "gap_over_eps": float(gaps.max() / eps),
            "eps": eps, "n_check": n_check}


# ---------------------------------------------------------------------------
# pathwise excursion bound
# ---------------------------------------------------------------------------


def gronwall_report(spec: PerturbationSpec, flow: SuspensionFlow, x0,
                    point: SuspensionPoint, eps: float, S: float,
                    dt: float | None = None, n_grid: int = 65) -> dict:
    """Pathwise sup bound on the slow excursion from its start.

    Checks |X_t - x0| <= sup_{r<=S} |int_0^r full forcing at frozen x0|
    * exp(int_0^S pointwise x-Lipschitz bound), all three pieces evaluated
    along the same fast orbit.  Requires the forcing to provide lip_x.
    """
    if spec.lip_x is None:
        raise SlowFastError("the forcing carries no pointwise Lipschitz data")
    base = flow.base
    if dt is None:
        dt = eps * base.inf_tau / 4.0
    grid = np.linspace(0.0, S, n_grid)
    xp = integrate_perturbed(spec, flow, x0, point, eps, S, dt,
                             record_times=grid)
    x0a = np.atleast_1d(np.asarray(x0, dtype=float))
    lhs = float(np.linalg.norm(xp.values - x0a, axis=1).max())

    fb0 = spec.fbar(x0a)
    frozen = birkhoff_integral(flow, lambda p: spec.f(x0a, p), point,
                               times=grid[1:] / eps)
    drive = eps * frozen.values + np.outer(grid[1:], fb0)
    drive_sup = float(np.linalg.norm(drive, axis=1).max())
    lip_int = eps * birkhoff_integral(flow, spec.lip_x, point, T=S / eps)
    bound = drive_sup * math.exp(lip_int)
    return {
        "sup_excursion": lhs, "bound": bound, "drive_sup": drive_sup,
        "lip_integral": float(lip_int),
        "ok": lhs <= bound * (1.0 + 1e-6) + 1e-12,
    }


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------


def _kernel_eligible(spec: PerturbationSpec, flow: SuspensionFlow) -> bool:
    return (isinstance(flow.base, ToyDoublingBase)
            and spec.meta.get("family") == "trig_cell")


def _sampled_start(flow: SuspensionFlow, master_seed: int, tag: str, i: int,
                   law: str) -> SuspensionPoint:
    gen = rng.substream(master_seed, f"{tag}:init", i)
    return flow.sample_point(gen, law=law)


def _toy_word_matrix(points: Sequence[SuspensionPoint], n_words: int) -> np.ndarray:
    words = np.empty((len(points), n_words), dtype=np.uint64)
    for i, p in enumerate(points):
        tape = p.state.tape
        tape.word(n_words - 1)  # extend; chunked draws keep the prefix stable
        words[i] = tape._words[:n_words]
    return words


def ensemble_perturbed(spec: PerturbationSpec, flow: SuspensionFlow,
                       eps: float, S: float, n_traj: int, master_seed: int,
                       *, x0=0.0, dt: float | None = None, record_times=None,
                       law: str = "volume", use_kernels: bool = True,
                       tag: str = "perturbed") -> tuple[np.ndarray, dict]:
    """Ensemble of perturbed paths from independent starting points.

    Starting points are drawn from per-trajectory counter streams derived
    from the master seed (reproducible, order-independent); returns values of
    shape (n_traj, n_times, dim) on the record grid plus a manifest dict.
    On the dyadic base with the built-in family the integration runs in a
    compiled kernel that replays the exact same orbits as the generic path.
    """
    base = flow.base
    if dt is None:
        dt = eps * base.inf_tau / 4.0
    grid = _prep_grid(S, record_times)
    t0 = time.perf_counter()
    points = [_sampled_start(flow, master_seed, tag, i, law)
              for i in range(n_traj)]
    used_kernel = False
    if use_kernels and _kernel_eligible(spec, flow):
        from . import _toykernels
        n_steps = int((S / eps) / base.inf_tau) + 8
        n_words = n_steps // 50 + 2
        words = _toy_word_matrix(points, n_words)
        regs = np.array([p.state.register for p in points], dtype=np.uint64)
        h0 = np.array([p.height_ticks for p in points], dtype=np.int64)
        cells = np.array([p.cell for p in points], dtype=np.int64)
        fam = trig_kernel_params(spec)
        x0a = np.atleast_1d(np.asarray(x0, dtype=float))
        vals, ok = _toykernels.perturbed_paths(
            words, regs, h0, cells, float(x0a[0]), eps, grid, dt,
            base.alpha, fam)
        if not np.all(ok):
            raise SlowFastError("a kernel trajectory ran out of orbit words")
        values = vals[:, :, None]
        used_kernel = True
    else:
        values = np.empty((n_traj, len(grid), spec.dim))
        for i, p in enumerate(points):
            path = integrate_perturbed(spec, flow, x0, p, eps, S, dt,
                                       record_times=grid)
            values[i] = path.values
    info = {
        "kind": "perturbed-ensemble", "eps": eps, "n": n_traj,
        "model": type(base).__name__, "law": law, "dt": dt,
        "seed": master_seed, "tag": tag, "kernel": used_kernel,
        "times": grid.tolist(), "wall_seconds": time.perf_counter() - t0,
    }
    return values, info


def ensemble_perturbed_birkhoff(spec: PerturbationSpec, flow: SuspensionFlow,
                                eps: float, times, n_traj: int,
                                master_seed: int, *, x0=0.0,
                                law: str = "volume", use_kernels: bool = True,
                                tag: str = "orbit-integral"
                                ) -> tuple[np.ndarray, dict]:
    """Ensemble of eps^(1/4)-scaled moving-argument orbit integrals.

    Returns values of shape (n_traj, n_times, dim) plus a manifest dict.
    """
    grid = np.asarray(times, dtype=float)
    t0 = time.perf_counter()
    points = [_sampled_start(flow, master_seed, tag, i, law)
              for i in range(n_traj)]
    base = flow.base
    used_kernel = False
    if use_kernels and _kernel_eligible(spec, flow):
        from . import _toykernels
        T = grid[-1] / eps
        n_steps = int(T / base.inf_tau) + 8
        n_words = n_steps // 50 + 2
        words = _toy_word_matrix(points, n_words)
        regs = np.array([p.state.register for p in points], dtype=np.uint64)
        h0 = np.array([p.height_ticks for p in points], dtype=np.int64)
        cells = np.array([p.cell for p in points], dtype=np.int64)
        fam = trig_kernel_params(spec)
        x0a = np.atleast_1d(np.asarray(x0, dtype=float))
        nodes = np.asarray(GL_NODES)
        wts = np.asarray(GL_WEIGHTS)
        raw, ok = _toykernels.moving_orbit_integrals(
            words, regs, h0, cells, float(x0a[0]), eps, grid / eps,
            base.alpha, fam, nodes, wts)
        if not np.all(ok):
            raise SlowFastError("a kernel trajectory ran out of orbit words")
        values = (eps ** 0.25) * raw[:, :, None]
        used_kernel = True
    else:
        values = np.empty((n_traj, len(grid), spec.dim))
        for i, p in enumerate(points):
            path = perturbed_birkhoff(spec, flow, p, eps, grid, x0=x0)
            values[i] = path.values
    info = {
        "kind": "orbit-integral-ensemble", "eps": eps, "n": n_traj,
        "model": type(base).__name__, "law": law, "seed": master_seed,
        "tag": tag, "kernel": used_kernel, "times": grid.tolist(),
        "wall_seconds": time.perf_counter() - t0,
    }
    return values, info


def ensemble_displacement(flow: SuspensionFlow, eps: float, t: float,
                          n_traj: int, master_seed: int, *,
                          law: str = "section", use_kernels: bool = True,
                          tag: str = "displacement") -> tuple[np.ndarray, dict]:
    """Ensemble of sqrt(eps)-normalized cell displacements at time t/eps.

    Counts the signed cells crossed by the suspension orbit during fast time
    t/eps (full roofs only, starting at the section) and scales by
    sqrt(eps); returns shape (n_traj,) plus a manifest dict.
    """
    base = flow.base
    if not isinstance(base, ToyDoublingBase):
        use_kernels = False
    t0 = time.perf_counter()
    points = [_sampled_start(flow, master_seed, tag, i, law)
              for i in range(n_traj)]
    target = t / eps
    if use_kernels:
        from . import _toykernels
        n_steps = int(target / base.inf_tau) + 8
        n_words = n_steps // 50 + 2
        words = _toy_word_matrix(points, n_words)
        regs = np.array([p.state.register for p in points], dtype=np.uint64)
        disp, ok = _toykernels.displacements(words, regs, to_ticks(target),
                                             base.alpha)
        if not np.all(ok):
            raise SlowFastError("a kernel trajectory ran out of orbit words")
        values = math.sqrt(eps) * disp.astype(float)
        used_kernel = True
    else:
        values = np.empty(n_traj)
        for i, p in enumerate(points):
            path = flow.displacement_path(p.state, [t], eps)
            values[i] = path.values[-1, 0]
        used_kernel = False
    info = {
        "kind": "displacement-ensemble", "eps": eps, "t": t, "n": n_traj,
        "model": type(base).__name__, "law": law, "seed": master_seed,
        "tag": tag, "kernel": used_kernel,
        "wall_seconds": time.perf_counter() - t0,
    }
    return values, info
