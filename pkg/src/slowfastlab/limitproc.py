"""Limit objects for the slow-fast theory: scaled Brownian motion, its local
time at zero, the pair rescaled by the mean roof, time-changed stochastic
integrals, local-time drift integrals, and the variation-of-constants
solution of the limiting linear equation.

Conventions
-----------
All paths are PathSample objects on strictly increasing grids starting at 0.
The driving motion carries variance parameter Sigma per unit time; its local
time at zero is estimated by the occupation-density rule
L_t = (2 delta)^-1 * int_0^t 1{|B_s| <= delta} ds evaluated with left
endpoints, so the estimate is nondecreasing and increases only on steps that
start inside the band.  The mean-roof rescaling sends (B', L') to
(B'_{t/tau_bar}, tau_bar * L'_{t/tau_bar}) — implemented exactly by relabeling
the grid, never by interpolation.

The time-changed integral sum_k sqrt(va(W_k)) * (B_{L_{k+1}} - B_{L_k})
evaluates the outer motion at the change points by Brownian-bridge
conditional sampling between known values (fresh increments beyond the last
known time), so the Gaussian law of the increments is preserved exactly; the
matrix square root is the unique symmetric nonnegative one, via symmetric
eigendecomposition with eigenvalues clipped at zero from -1e-10.

Ensembles derive one counter-based stream per sample index and are therefore
reproducible and order-independent.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import rng
from .slowfast import GridMismatch, PathSample, integrate_averaged

SYMMETRY_TOL = 1e-10


class NonSymmetricVariance(Exception):
    """The pointwise variance matrix is not symmetric within tolerance."""


@dataclass(frozen=True)
class LimitLawParams:
    """Parameters of the limit laws.

    tau_bar: mean roof of the fast flow (positive).
    Sigma:   variance per section step of the driving cell walk (positive).
    a_of:    x -> d x d symmetric nonnegative matrix (or scalar for d = 1),
             the lag-summed self-covariance of the fiber-integrated forcing
             per section step; the time-changed integrand uses a_of / tau_bar.
    h_of:    x -> R^d, the space average of the forcing at frozen slow value
             (fiber-integrated, against the unnormalized invariant measure);
             the drift integrand uses h_of / tau_bar.

    Both integrands are normalized by the mean roof internally because the
    drift and change-of-time run against the rescaled local time, whose
    clock already carries one factor of tau_bar.
    """

    tau_bar: float
    Sigma: float
    a_of: Callable[[np.ndarray], Any] | None = None
    h_of: Callable[[np.ndarray], Any] | None = None
    dim: int = 1

    def __post_init__(self):
        if not (self.tau_bar > 0):
            raise ValueError(f"tau_bar must be positive, got {self.tau_bar}")
        if not (self.Sigma > 0):
            raise ValueError(f"Sigma must be positive, got {self.Sigma}")
        if self.dim < 1:
            raise ValueError("dim must be at least 1")

    def a_tilde_of(self, x):
        """Roof-normalized variance a(x)/tau_bar."""
        if self.a_of is None:
            raise ValueError("params carry no variance function")
        return np.asarray(self.a_of(x), dtype=float) / self.tau_bar

    def h_tilde_of(self, x):
        """Roof-normalized drift coefficient h(x)/tau_bar."""
        if self.h_of is None:
            raise ValueError("params carry no drift function")
        return np.asarray(self.h_of(x), dtype=float) / self.tau_bar


@dataclass(frozen=True)
class LimitPathBundle:
    """One joint realization of the limit objects on a common fine grid.

    Bprime/Lprime0 live on the driving-motion time axis; the rescaled pair
    Btilde/Ltilde, the averaged path W, and the derived paths V and Y live on
    the slow axis.  B is the independent outer motion for time-changed kinds
    (None otherwise).
    """

    grid: np.ndarray
    Bprime: PathSample
    Lprime0: PathSample
    Btilde: PathSample
    Ltilde: PathSample
    W: PathSample
    V: PathSample
    Y: PathSample
    B: PathSample | None = None
    kind: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        lp = self.Lprime0.values[:, 0]
        if lp[0] != 0.0 or np.any(np.diff(lp) < 0):
            raise ValueError("local time must start at 0 and be nondecreasing")


# ---------------------------------------------------------------------------
# elementary constructions
# ---------------------------------------------------------------------------


def simulate_bm(Sigma: float, grid, seed: int, dim: int = 1,
                tag: str = "bm") -> PathSample:
    """Brownian path with variance Sigma per unit time, started at 0.

    Increments over the grid are independent centered Gaussians of variance
    Sigma * dt (componentwise for dim > 1); Sigma = 0 gives the zero path.
    """
    if Sigma < 0:
        raise ValueError(f"variance rate must be nonnegative, got {Sigma}")
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) == 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be nonempty and strictly increasing")
    gen = rng.substream(seed, tag, 0)
    steps = np.diff(grid)
    incr = gen.standard_normal((len(steps), dim)) * np.sqrt(Sigma * steps)[:, None]
    values = np.vstack([np.zeros((1, dim)), np.cumsum(incr, axis=0)])
    return PathSample(grid, values, meta={"kind": "bm", "Sigma": Sigma,
                                          "seed": seed, "tag": tag})


def local_time_at_zero(Bpath: PathSample, bandwidth: float) -> PathSample:
    """Occupation-density estimate of the local time at zero.

    L_t = (2 delta)^-1 * int_0^t 1{|B_s| <= delta} ds with the indicator read
    at the left endpoint of each step: nondecreasing, starts at 0, and flat
    on every step that starts outside the band.
    """
    if not (bandwidth > 0):
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    if Bpath.dim != 1:
        raise ValueError("local time at zero is defined for scalar paths")
    t = Bpath.times
    b = Bpath.values[:, 0]
    inside = (np.abs(b[:-1]) <= bandwidth).astype(float)
    incr = inside * np.diff(t) / (2.0 * bandwidth)
    values = np.concatenate([[0.0], np.cumsum(incr)])
    return PathSample(t, values.reshape(-1, 1),
                      meta={"kind": "local-time", "bandwidth": bandwidth})


def rescale_pair(Bprime: PathSample, Lprime0: PathSample,
                 tau_bar: float) -> tuple[PathSample, PathSample]:
    """Mean-roof rescaling: (B'_{t/tau_bar}, tau_bar * L'_{t/tau_bar}).

    Exact grid relabeling: a path known at times u is returned at times
    tau_bar * u, with the local-time values multiplied by tau_bar.
    """
    if not (tau_bar > 0):
        raise ValueError(f"tau_bar must be positive, got {tau_bar}")
    if Bprime.times.shape != Lprime0.times.shape or np.any(
            Bprime.times != Lprime0.times):
        raise GridMismatch("rescaling needs both paths on the same grid")
    new_times = tau_bar * Bprime.times
    bt = PathSample(new_times, Bprime.values.copy(),
                    meta={**Bprime.meta, "rescaled_by": tau_bar})
    lt = PathSample(new_times, tau_bar * Lprime0.values,
                    meta={**Lprime0.meta, "rescaled_by": tau_bar})
    return bt, lt


# ---------------------------------------------------------------------------
# matrix square root
# ---------------------------------------------------------------------------


def sqrt_psd(a, tol: float = SYMMETRY_TOL) -> np.ndarray:
    """Unique symmetric nonnegative square root of a symmetric matrix.

    Scalars and 1x1 matrices take the scalar branch.  Asymmetry beyond tol
    raises NonSymmetricVariance; eigenvalues below -tol raise ValueError;
    eigenvalues in [-tol, 0) are clipped to 0.
    """
    arr = np.atleast_2d(np.asarray(a, dtype=float))
    if arr.shape[0] != arr.shape[1]:
        raise ValueError(f"variance matrix must be square, got {arr.shape}")
    if arr.shape == (1, 1):
        v = arr[0, 0]
        if v < -tol:
            raise ValueError(f"negative variance {v}")
        return np.array([[math.sqrt(max(v, 0.0))]])
    gap = np.abs(arr - arr.T).max()
    if gap > tol:
        raise NonSymmetricVariance(
            f"variance matrix asymmetric by {gap} (tolerance {tol})")
    sym = 0.5 * (arr + arr.T)
    lam, U = np.linalg.eigh(sym)
    if lam.min() < -tol:
        raise ValueError(f"variance matrix has eigenvalue {lam.min()}")
    lam = np.clip(lam, 0.0, None)
    return (U * np.sqrt(lam)) @ U.T


# ---------------------------------------------------------------------------
# bridge evaluation of a Brownian path
# ---------------------------------------------------------------------------


def evaluate_brownian_at(Bpath: PathSample, times, gen: np.random.Generator
                         ) -> np.ndarray:
    """Values of the Brownian path at nondecreasing query times.

    Exact stored values where a query hits the path's grid; Brownian-bridge
    conditional samples between known values (each sample becomes known for
    later queries); fresh independent increments beyond the last known time.
    One standard normal vector is consumed per query that does not hit a
    stored time, even across zero-length gaps, so the draw count depends only
    on the query pattern.
    """
    q = np.asarray(times, dtype=float)
    if q.ndim != 1 or len(q) == 0 or np.any(np.diff(q) < 0):
        raise ValueError("query times must be nondecreasing")
    kt = Bpath.times
    kv = Bpath.values
    d = Bpath.dim
    if q[0] < kt[0]:
        raise ValueError("queries start before the path's first known time")
    out = np.empty((len(q), d))
    ptr = 0  # index of the last stored point with time <= current position
    prev_t = kt[0]
    prev_v = kv[0].copy()
    for i, t in enumerate(q):
        while ptr + 1 < len(kt) and kt[ptr + 1] <= t:
            ptr += 1
            prev_t = kt[ptr]
            prev_v = kv[ptr].copy()
        if t == prev_t:
            out[i] = prev_v
            continue
        xi = gen.standard_normal(d)
        if ptr + 1 >= len(kt):
            # beyond all known values: fresh increment
            var = t - prev_t
            val = prev_v + math.sqrt(var) * xi
        else:
            # bridge between the running left value and the next stored one
            tr = kt[ptr + 1]
            vr = kv[ptr + 1]
            frac = (t - prev_t) / (tr - prev_t)
            mean = prev_v + frac * (vr - prev_v)
            var = (t - prev_t) * (tr - t) / (tr - prev_t)
            val = mean + math.sqrt(max(var, 0.0)) * xi
        out[i] = val
        prev_t = t
        prev_v = val
    return out


# ---------------------------------------------------------------------------
# stochastic and Stieltjes integrals
# ---------------------------------------------------------------------------


def time_changed_integral(a_of, Wpath: PathSample, B: PathSample,
                          Ltilde: PathSample, seed: int = 0,
                          tag: str = "bridge") -> PathSample:
    """V_t = int_0^t sqrt(va(W_s)) dB_{L_s}: left-point Stieltjes sum with the
    outer motion evaluated at the time-change points by bridge refinement.

    a_of maps a slow value to the pointwise variance (scalar or d x d
    symmetric nonnegative matrix); the square root is the symmetric
    nonnegative one.  W and L must share a grid.
    """
    if Wpath.times.shape != Ltilde.times.shape or np.any(
            Wpath.times != Ltilde.times):
        raise GridMismatch("time change needs W and L on the same grid")
    ell = Ltilde.values[:, 0]
    if np.any(np.diff(ell) < 0):
        raise ValueError("time-change path must be nondecreasing")
    d = B.dim
    gen = rng.substream(seed, tag, 0)
    bq = evaluate_brownian_at(B, ell, gen)
    n = len(ell)
    vals = np.zeros((n, d))
    acc = np.zeros(d)
    for k in range(n - 1):
        sq = sqrt_psd(a_of(Wpath.values[k]))
        if sq.shape != (d, d):
            raise ValueError(
                f"variance shape {sq.shape} incompatible with driver dim {d}")
        acc = acc + sq @ (bq[k + 1] - bq[k])
        vals[k + 1] = acc
    return PathSample(Wpath.times.copy(), vals,
                      meta={"kind": "time-changed-integral", "seed": seed})


def drift_integral(h_of, Wpath: PathSample, Ltilde: PathSample) -> PathSample:
    """V_t = int_0^t h(W_s) dL_s: left-point Stieltjes sum against the
    nondecreasing path L."""
    if Wpath.times.shape != Ltilde.times.shape or np.any(
            Wpath.times != Ltilde.times):
        raise GridMismatch("drift integral needs W and L on the same grid")
    ell = Ltilde.values[:, 0]
    if np.any(np.diff(ell) < 0):
        raise ValueError("integrator path must be nondecreasing")
    n = len(ell)
    h0 = np.atleast_1d(np.asarray(h_of(Wpath.values[0]), dtype=float))
    d = h0.shape[0]
    vals = np.zeros((n, d))
    acc = np.zeros(d)
    hk = h0
    for k in range(n - 1):
        if k > 0:
            hk = np.atleast_1d(np.asarray(h_of(Wpath.values[k]), dtype=float))
        acc = acc + hk * (ell[k + 1] - ell[k])
        vals[k + 1] = acc
    return PathSample(Wpath.times.copy(), vals,
                      meta={"kind": "drift-integral"})


# ---------------------------------------------------------------------------
# variation of constants
# ---------------------------------------------------------------------------


def _generator_prefix(Darr: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Trapezoidal running integral of the generator along the grid."""
    n = len(t)
    d = Darr.shape[1]
    G = np.zeros((n, d, d))
    for k in range(n - 1):
        G[k + 1] = G[k] + 0.5 * (t[k + 1] - t[k]) * (Darr[k] + Darr[k + 1])
    return G


def variation_of_constants(Vpath: PathSample, Wpath: PathSample,
                           dfbar) -> PathSample:
    """Y_t = V_t + int_0^t D(W_s) exp(G_t - G_s) V_s ds with G the running
    trapezoidal integral of D(W); the s-integral is trapezoidal on the grid.

    The result solves the linear equation dY = dV + D(W) Y dt (checked by an
    Euler re-solve).  Scalar problems use an O(n) prefix form of the same
    sums; matrix problems evaluate the exponentials pairwise.
    """
    if Vpath.times.shape != Wpath.times.shape or np.any(
            Vpath.times != Wpath.times):
        raise GridMismatch("variation of constants needs one common grid")
    t = Vpath.times
    n = len(t)
    d = Vpath.dim
    Darr = np.stack([np.atleast_2d(np.asarray(dfbar(Wpath.values[k]),
                                              dtype=float))
                     for k in range(n)])
    if Darr.shape[1:] != (d, d):
        raise ValueError(
            f"generator shape {Darr.shape[1:]} incompatible with dim {d}")
    V = Vpath.values
    if d == 1:
        Df = Darr[:, 0, 0]
        G = np.concatenate([[0.0], np.cumsum(
            0.5 * np.diff(t) * (Df[:-1] + Df[1:]))])
        psi = Df * np.exp(-G) * V[:, 0]
        P = np.concatenate([[0.0], np.cumsum(
            0.5 * np.diff(t) * (psi[:-1] + psi[1:]))])
        Y = V[:, 0] + np.exp(G) * P
        vals = Y.reshape(-1, 1)
    else:
        from scipy.linalg import expm

        G = _generator_prefix(Darr, t)
        vals = np.empty((n, d))
        vals[0] = V[0]
        for k in range(1, n):
            # trapezoid over s in [0, t_k] of D(s) exp(G_k - G_s) V_s
            terms = np.empty((k + 1, d))
            for j in range(k + 1):
                terms[j] = Darr[j] @ (expm(G[k] - G[j]) @ V[j])
            w = np.zeros(k + 1)
            dts = np.diff(t[:k + 1])
            w[:-1] += 0.5 * dts
            w[1:] += 0.5 * dts
            vals[k] = V[k] + w @ terms
    return PathSample(t.copy(), vals, meta={"kind": "variation-of-constants"})


def euler_resolve(Vpath: PathSample, Wpath: PathSample, dfbar) -> PathSample:
    """Forward-Euler solution of dY = dV + D(W) Y dt from Y_0 = V_0.

    First-order reference scheme for checking variation_of_constants; the two
    agree to O(dt)."""
    if Vpath.times.shape != Wpath.times.shape or np.any(
            Vpath.times != Wpath.times):
        raise GridMismatch("Euler re-solve needs one common grid")
    t = Vpath.times
    V = Vpath.values
    n, d = V.shape
    vals = np.empty((n, d))
    y = V[0].copy()
    vals[0] = y
    for k in range(n - 1):
        D = np.atleast_2d(np.asarray(dfbar(Wpath.values[k]), dtype=float))
        y = y + (t[k + 1] - t[k]) * (D @ y) + (V[k + 1] - V[k])
        vals[k + 1] = y
    return PathSample(t.copy(), vals, meta={"kind": "euler-resolve"})


# ---------------------------------------------------------------------------
# joint sampling of the limit laws
# ---------------------------------------------------------------------------

KINDS = ("integrable", "noncentered", "centered", "birkhoff")


def _fine_grids(grid: np.ndarray, tau_bar: float, dt: float
                ) -> tuple[np.ndarray, np.ndarray]:
    """Driving-axis fine grid containing grid/tau_bar exactly, and the indices
    of those required points.  Each required interval is subdivided uniformly
    to spacing at most dt, so no two grid points sit within rounding distance
    of each other."""
    req = grid / tau_bar
    pieces = [np.array([req[0]])]
    idx = [0]
    for a, b in zip(req[:-1], req[1:]):
        k = max(1, int(math.ceil((b - a) / dt - 1e-12)))
        pieces.append(np.linspace(a, b, k + 1)[1:])
        idx.append(idx[-1] + k)
    fine = np.concatenate(pieces)
    return fine, np.asarray(idx)


def _eval_along(fn, W: np.ndarray, shape: tuple) -> np.ndarray:
    out = np.empty((len(W),) + shape)
    for k in range(len(W)):
        out[k] = np.asarray(fn(W[k]), dtype=float).reshape(shape)
    return out


def _sample_frame(params: LimitLawParams, kind: str, x0, grid, fbar, dfbar,
                  dt: float) -> dict:
    """Deterministic per-ensemble work shared by every bundle: the fine grid,
    the averaged path, and the variance/drift/generator functions evaluated
    along it."""
    x0a = np.atleast_1d(np.asarray(x0, dtype=float))
    d = len(x0a)
    fine_u, idx = _fine_grids(grid, params.tau_bar, dt)
    fine_t = params.tau_bar * fine_u

    if kind == "birkhoff":
        W = PathSample(fine_t, x0a[None, :] + fine_t[:, None],
                       meta={"kind": "diagonal"})
    elif kind == "integrable" or fbar is None:
        W = PathSample(fine_t, np.tile(x0a, (len(fine_t), 1)),
                       meta={"kind": "frozen"})
    else:
        W = integrate_averaged(fbar, x0a, float(fine_t[-1]),
                               dt=max(float(fine_t[-1]) / (len(fine_t) - 1),
                                      1e-12),
                               record_times=fine_t)

    frame = {"x0a": x0a, "d": d, "fine_u": fine_u, "fine_t": fine_t,
             "idx": idx, "W": W}
    n = len(fine_t)
    if kind == "integrable":
        if params.h_of is None:
            raise ValueError("integrable kind needs h_of")
        frame["h0"] = np.atleast_1d(params.h_tilde_of(x0a))
    elif kind == "noncentered":
        if params.h_of is None:
            raise ValueError("noncentered kind needs h_of")
        frame["h_arr"] = _eval_along(params.h_tilde_of, W.values, (d,))
    else:
        if params.a_of is None:
            raise ValueError(f"{kind} kind needs a_of")
        frame["sqa"] = np.stack([sqrt_psd(params.a_tilde_of(W.values[k]))
                                 for k in range(n)])
    if dfbar is not None and kind in ("noncentered", "centered") and d == 1:
        Df = np.array([float(np.asarray(dfbar(W.values[k])).reshape(()))
                       for k in range(n)])
        G = np.concatenate([[0.0], np.cumsum(
            0.5 * np.diff(fine_t) * (Df[:-1] + Df[1:]))])
        frame["Df"] = Df
        frame["G"] = G
    return frame


def _voc_scalar(V: np.ndarray, t: np.ndarray, Df: np.ndarray,
                G: np.ndarray) -> np.ndarray:
    """O(n) prefix evaluation of the scalar variation-of-constants sum."""
    psi = Df * np.exp(-G) * V[:, 0]
    P = np.concatenate([[0.0], np.cumsum(
        0.5 * np.diff(t) * (psi[:-1] + psi[1:]))])
    return (V[:, 0] + np.exp(G) * P).reshape(-1, 1)


def limit_bundle(params: LimitLawParams, kind: str, x0, grid, seed: int,
                 index: int = 0, fbar=None, dfbar=None, dt: float = 1e-4,
                 bandwidth: float | None = None,
                 _frame: dict | None = None) -> LimitPathBundle:
    """One joint realization of the limit objects of the requested kind.

    kinds: "integrable" (drift along the local time at frozen slow value),
    "noncentered" (local-time drift along the averaged path, then variation
    of constants), "centered" (time-changed integral along the averaged
    path, then variation of constants), "birkhoff" (time-changed integral
    along the moving diagonal, no correction).  fbar/dfbar default to the
    zero vector field.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown limit kind {kind!r}; choose from {KINDS}")
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 2 or grid[0] != 0.0 or np.any(
            np.diff(grid) <= 0):
        raise ValueError("grid must start at 0 and increase strictly")
    delta = 2.0 * math.sqrt(dt) if bandwidth is None else bandwidth
    fr = _frame if _frame is not None else _sample_frame(
        params, kind, x0, grid, fbar, dfbar, dt)
    d = fr["d"]
    fine_t = fr["fine_t"]
    W = fr["W"]

    bprime = simulate_bm(params.Sigma, fr["fine_u"], seed, dim=1,
                         tag=f"limit:{kind}:driver:{index}")
    lprime = local_time_at_zero(bprime, delta)
    btilde, ltilde = rescale_pair(bprime, lprime, params.tau_bar)
    ell = ltilde.values[:, 0]
    dL = np.diff(ell)
    has_D = "G" in fr

    if kind == "integrable":
        vals = ell[:, None] * fr["h0"][None, :]
        V = PathSample(fine_t, vals, meta={"kind": "drift-integral"})
        Y = V
        B = None
    elif kind == "noncentered":
        vals = np.vstack([np.zeros((1, d)),
                          np.cumsum(fr["h_arr"][:-1] * dL[:, None], axis=0)])
        V = PathSample(fine_t, vals, meta={"kind": "drift-integral"})
        B = None
        if has_D:
            Y = PathSample(fine_t, _voc_scalar(vals, fine_t, fr["Df"],
                                               fr["G"]),
                           meta={"kind": "variation-of-constants"})
        elif dfbar is not None:
            Y = variation_of_constants(V, W, dfbar)
        else:
            Y = V
    else:  # centered or birkhoff: time-changed integral
        gen = rng.substream(seed, f"limit:{kind}:outer:{index}", 0)
        xi = gen.standard_normal((len(dL), d))
        dB = xi * np.sqrt(dL)[:, None]
        bvals = np.vstack([np.zeros((1, d)), np.cumsum(dB, axis=0)])
        incr = np.einsum("kij,kj->ki", fr["sqa"][:-1], dB)
        vals = np.vstack([np.zeros((1, d)), np.cumsum(incr, axis=0)])
        V = PathSample(fine_t, vals, meta={"kind": "time-changed-integral"})
        # outer motion indexed by elapsed change time; plateaus carry zero
        # increments, so collapsing them to a strictly increasing grid keeps
        # every nonzero value
        keep = np.concatenate([[True], dL > 0])
        B = PathSample(ell[keep], bvals[keep],
                       meta={"kind": "bm", "time_axis": "change-time"})
        if kind == "birkhoff" or dfbar is None:
            Y = V
        elif has_D:
            Y = PathSample(fine_t, _voc_scalar(vals, fine_t, fr["Df"],
                                               fr["G"]),
                           meta={"kind": "variation-of-constants"})
        else:
            Y = variation_of_constants(V, W, dfbar)

    return LimitPathBundle(
        grid=grid, Bprime=bprime, Lprime0=lprime, Btilde=btilde,
        Ltilde=ltilde, W=W, V=V, Y=Y, B=B, kind=kind,
        meta={"seed": seed, "index": index, "dt": dt, "bandwidth": delta,
              "extract_idx": fr["idx"]})


def sample_limit_law(params: LimitLawParams, kind: str, x0, grid,
                     n_samples: int, seed: int, *, fbar=None, dfbar=None,
                     dt: float = 1e-4, bandwidth: float | None = None,
                     keep_bundles: bool = False
                     ) -> tuple[np.ndarray, dict]:
    """Ensemble of limit realizations: values (n_samples, len(grid), d).

    Composes the elementary operations per sample with counter-derived
    streams (sample i is reproducible in isolation); returns the marginal
    values of Y (the final limit object of the kind) on the requested grid,
    plus a manifest dict.  The deterministic frame (averaged path, variance
    square roots, generator prefix) is computed once and shared.
    keep_bundles=True attaches the full bundles to the manifest.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 2 or grid[0] != 0.0 or np.any(
            np.diff(grid) <= 0):
        raise ValueError("grid must start at 0 and increase strictly")
    if kind not in KINDS:
        raise ValueError(f"unknown limit kind {kind!r}; choose from {KINDS}")
    t0 = time.perf_counter()
    frame = _sample_frame(params, kind, x0, grid, fbar, dfbar, dt)
    bundles = []
    values = None
    for i in range(n_samples):
        b = limit_bundle(params, kind, x0, grid, seed, index=i, fbar=fbar,
                         dfbar=dfbar, dt=dt, bandwidth=bandwidth,
                         _frame=frame)
        vals = b.Y.values[frame["idx"]]
        if values is None:
            values = np.empty((n_samples,) + vals.shape)
        values[i] = vals
        if keep_bundles:
            bundles.append(b)
    info = {
        "kind": kind, "n": n_samples, "seed": seed, "dt": dt,
        "bandwidth": bandwidth if bandwidth is not None
        else 2.0 * math.sqrt(dt),
        "tau_bar": params.tau_bar, "Sigma": params.Sigma,
        "x0": np.atleast_1d(np.asarray(x0, dtype=float)).tolist(),
        "times": grid.tolist(),
        "wall_seconds": time.perf_counter() - t0,
    }
    if keep_bundles:
        info["bundles"] = bundles
    return values, info
