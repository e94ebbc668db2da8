"""Suspension flows over Z-extensions of probability-preserving base maps.

A Z-extension drives two clocks at once: the discrete step count of the base
map, whose cell coordinate performs a (centered, bounded-increment) random
walk on the integers, and the continuous suspension time under a roof
function.  This module provides the shared machinery — crossing counts n_t,
partial clock sums t_m, the suspension flow, and normalized displacement
paths — over two concrete bases: a fast dyadic toy model and the Lorentz-gas
collision section from :mod:`slowfastlab.geometry`.

Time arithmetic
---------------
Suspension time is quantized to integer ticks of 2**-32 time units.  Roofs
are evaluated in float64 once per step and rounded to ticks; all crossing
counts, partial sums, and heights are then exact int64 arithmetic, so the
semigroup law and the sandwich t_n <= t < t_{n+1} hold *exactly*, not merely
to a tolerance.  The quantization perturbs each roof by at most 2**-33, far
below every statistical tolerance in this package.

Orbit material
--------------
Doubling-map orbits live in a 64-bit register: one base step is a left shift,
and every 50 steps the vacated low bits are refilled from a counter-based
random stream (the binary expansion of a Lebesgue-random point, revealed
lazily).  Give each trajectory its own generator — states on one tape
share the same lazily-extended word sequence, so replaying a held state is
deterministic.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import geometry

TICKS_PER_UNIT = 2 ** 32
_MASK64 = (1 << 64) - 1
REFRESH_PERIOD = 50
_REFRESH_MASK = (1 << REFRESH_PERIOD) - 1


class DynSysError(Exception):
    pass


def to_ticks(t: float) -> int:
    """Nearest-tick quantization of a nonnegative time."""
    if not (math.isfinite(t) and t >= 0.0):
        raise ValueError(f"time must be finite and nonnegative, got {t}")
    return round(t * TICKS_PER_UNIT)


def from_ticks(k: int) -> float:
    return k / TICKS_PER_UNIT


def roof_ticks(tau: float) -> int:
    """Tick count of a roof value (half-even rounding, like the kernels)."""
    return round(tau * TICKS_PER_UNIT)


# ---------------------------------------------------------------------------
# base maps
# ---------------------------------------------------------------------------


class ZExtensionBase(ABC):
    """Probability-preserving base map with an integer step function.

    Concrete bases declare bounds: 0 < inf_tau <= sup_tau < inf for the roof
    and sup_abs_phi for the step function, and provide a sampler for the
    invariant probability measure of the base.
    """

    inf_tau: float
    sup_tau: float
    sup_abs_phi: float

    @abstractmethod
    def base_step(self, state) -> Any:
        """One application of the base map."""

    @abstractmethod
    def phi(self, state) -> int:
        """Integer cell increment produced by the step leaving `state`."""

    @abstractmethod
    def tau(self, state) -> float:
        """Roof (return time) over `state`."""

    @abstractmethod
    def sample_base(self, gen: np.random.Generator) -> Any:
        """Draw a state from the base invariant probability measure."""

    def step_with_data(self, state) -> tuple[Any, int, float]:
        """(next state, phi, tau) for one step; override if one call suffices."""
        return self.base_step(state), self.phi(state), self.tau(state)

    def check_bounds(self) -> None:
        if not (0.0 < self.inf_tau <= self.sup_tau < math.inf):
            raise DynSysError(
                f"roof bounds invalid: inf {self.inf_tau}, sup {self.sup_tau}")


class _WordTape:
    """Append-only sequence of raw uint64 words from one generator.

    Chunked draws of full-range uint64 are prefix-stable, so the words a
    state sees do not depend on how far other states on the same tape have
    advanced.
    """

    __slots__ = ("_gen", "_words")

    def __init__(self, gen: np.random.Generator):
        self._gen = gen
        self._words: list[int] = []

    def word(self, i: int) -> int:
        while i >= len(self._words):
            chunk = self._gen.integers(0, 2 ** 64, size=64, dtype=np.uint64)
            self._words.extend(int(w) for w in chunk)
        return self._words[i]


@dataclass(frozen=True)
class ToyState:
    """Dyadic point of the doubling map, as a 64-bit register.

    `step` indexes the refresh schedule; `tape` supplies refresh words and is
    excluded from equality (states are equal iff register and step agree).
    """

    register: int
    step: int
    tape: _WordTape = field(compare=False, repr=False)

    @property
    def x(self) -> float:
        return self.register * 2.0 ** -64


class ToyDoublingBase(ZExtensionBase):
    """Doubling map with roof 1 + alpha*sin(2 pi x) and a top-bit step.

    phi reads the leading register bit (+1 below one half, -1 above), so
    successive phi values are i.i.d. fair signs under the uniform measure and
    the cell walk has unit variance per step, exactly.
    """

    def __init__(self, alpha: float = 0.3):
        if not (0.0 <= alpha < 1.0):
            raise ValueError(f"roof amplitude must lie in [0,1), got {alpha}")
        self.alpha = alpha
        self.inf_tau = 1.0 - alpha
        self.sup_tau = 1.0 + alpha
        self.sup_abs_phi = 1.0

    def base_step(self, state: ToyState) -> ToyState:
        reg = (state.register << 1) & _MASK64
        step = state.step + 1
        if step % REFRESH_PERIOD == 0:
            fresh = state.tape.word(step // REFRESH_PERIOD) & _REFRESH_MASK
            reg |= fresh
        return ToyState(reg, step, state.tape)

    def phi(self, state: ToyState) -> int:
        return 1 if state.register < 2 ** 63 else -1

    def tau(self, state: ToyState) -> float:
        return 1.0 + self.alpha * math.sin(2.0 * math.pi * state.x)

    def sample_base(self, gen: np.random.Generator) -> ToyState:
        tape = _WordTape(gen)
        return ToyState(tape.word(0), 0, tape)


@dataclass(frozen=True)
class SectionState:
    """Collision-section state in the cell-0 quotient of the Lorentz gas."""

    obstacle_id: int
    angle: float
    vx: float
    vy: float


class BilliardSectionBase(ZExtensionBase):
    """Collision map of the periodic Lorentz gas as a Z-extension base.

    States live on the fundamental-cell quotient; phi is the signed number of
    cells the free flight crosses, tau the flight time.  The invariant
    collision measure has density cos(psi) in the reflection angle psi and is
    uniform in arclength.
    """

    def __init__(self, table: geometry.BilliardTable):
        problems = table.disjointness_violations()
        if problems:
            raise DynSysError("invalid table: " + "; ".join(problems))
        if not table.obstacles:
            raise DynSysError("billiard base needs at least one obstacle")
        self.table = table
        self.inf_tau = self._min_gap(table)
        self.sup_tau = table.horizon_bound
        self.sup_abs_phi = math.ceil(table.horizon_bound) + 1.0
        self.check_bounds()

    @staticmethod
    def _min_gap(table: geometry.BilliardTable) -> float:
        gap = math.inf
        obs = table.obstacles
        for i, a in enumerate(obs):
            for k in range(i, len(obs)):
                b = obs[k]
                for dl in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        if i == k and dl == 0 and dj == 0:
                            continue
                        d = math.hypot(b.cx + dl - a.cx, b.cy + dj - a.cy)
                        gap = min(gap, d - a.r - b.r)
        return gap

    def step_with_data(self, state: SectionState) -> tuple[SectionState, int, float]:
        b = geometry.BoundaryState(state.obstacle_id, 0, state.angle,
                                   state.vx, state.vy)
        nb, tau = geometry.collision_map(b, self.table)
        nxt = SectionState(nb.obstacle_id, nb.angle, nb.vx, nb.vy)
        return nxt, nb.cell, tau

    def base_step(self, state: SectionState) -> SectionState:
        return self.step_with_data(state)[0]

    def phi(self, state: SectionState) -> int:
        return self.step_with_data(state)[1]

    def tau(self, state: SectionState) -> float:
        return self.step_with_data(state)[2]

    def sample_base(self, gen: np.random.Generator) -> SectionState:
        radii = np.array([o.r for o in self.table.obstacles])
        weights = radii / radii.sum()  # arclength is proportional to radius
        k = int(gen.choice(len(radii), p=weights))
        theta = 2.0 * math.pi * float(gen.random())
        psi = math.asin(2.0 * float(gen.random()) - 1.0)  # cos-law
        ang = theta + psi
        return SectionState(k, theta, math.cos(ang), math.sin(ang))


# ---------------------------------------------------------------------------
# suspension flow
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SuspensionPoint:
    """Point of the suspension: base state, integer cell, height in ticks."""

    state: Any
    cell: int
    height_ticks: int

    @property
    def height(self) -> float:
        return from_ticks(self.height_ticks)


class SuspensionFlow:
    """Unit-speed vertical flow under the roof of a Z-extension base."""

    def __init__(self, base: ZExtensionBase):
        base.check_bounds()
        self.base = base

    # -- construction ----------------------------------------------------

    def point(self, state, cell: int = 0, height: float = 0.0) -> SuspensionPoint:
        h = to_ticks(height)
        tt = roof_ticks(self.base.tau(state))
        if not (0 <= h < tt):
            raise DynSysError(
                f"height {height} outside [0, {from_ticks(tt)}) over this state")
        return SuspensionPoint(state, cell, h)

    def sample_point(self, gen: np.random.Generator, law: str = "volume") -> SuspensionPoint:
        """Draw from the normalized invariant measure of the suspension.

        law="volume": base state with density tau/mean(tau), height uniform
        under the roof (the flow-invariant probability).  law="section":
        base measure itself, height 0.
        """
        if law == "section":
            return SuspensionPoint(self.base.sample_base(gen), 0, 0)
        if law != "volume":
            raise ValueError(f"unknown initial law {law!r}")
        while True:
            state = self.base.sample_base(gen)
            tt = roof_ticks(self.base.tau(state))
            if float(gen.random()) * roof_ticks(self.base.sup_tau) <= tt:
                return SuspensionPoint(state, 0, int(gen.integers(0, tt)))

    # -- clocks ------------------------------------------------------------

    def n_t(self, state, t: float) -> int:
        """Number of roof crossings in [0, t] starting from height 0."""
        return self._n_ticks(state, to_ticks(t))

    def _n_ticks(self, state, ticks: int) -> int:
        n, acc = 0, 0
        while True:
            nxt, _dphi, tau = self.base.step_with_data(state)
            tt = roof_ticks(tau)
            if acc + tt > ticks:
                return n
            acc += tt
            n += 1
            state = nxt

    def t_m(self, state, m: int) -> float:
        """Partial clock sum t_m = sum_{k<m} tau(T^k omega)."""
        return from_ticks(self.t_m_ticks(state, m))

    def t_m_ticks(self, state, m: int) -> int:
        if m < 0:
            raise ValueError("clock index must be nonnegative")
        acc = 0
        for _ in range(m):
            state, _dphi, tau = self.base.step_with_data(state)
            acc += roof_ticks(tau)
        return acc

    # -- flow ----------------------------------------------------------------

    def flow(self, p: SuspensionPoint, t: float) -> SuspensionPoint:
        return self.flow_ticks(p, to_ticks(t))

    def flow_ticks(self, p: SuspensionPoint, ticks: int) -> SuspensionPoint:
        if ticks < 0:
            raise ValueError("flow time must be nonnegative")
        state, cell, h = p.state, p.cell, p.height_ticks + ticks
        while True:
            nxt, dphi, tau = self.base.step_with_data(state)
            tt = roof_ticks(tau)
            if h < tt:
                return SuspensionPoint(state, cell, h)
            h -= tt
            cell += dphi
            state = nxt

    # -- normalized displacement ------------------------------------------

    def displacement_path(self, state, times: Sequence[float], eps: float,
                          height_ticks: int = 0):
        """Path of sqrt(eps) * (cells crossed by suspension time t/eps).

        Starting from the given height, counts signed cell increments up to
        each requested time (nondecreasing grid) and scales diffusively.
        Returns a PathSample.
        """
        from .slowfast import PathSample  # deferred: avoids an import cycle

        if eps <= 0:
            raise ValueError("eps must be positive")
        times = np.asarray(times, dtype=float)
        if times.ndim != 1 or len(times) == 0:
            raise ValueError("need a one-dimensional, nonempty time grid")
        if np.any(np.diff(times) <= 0):
            raise ValueError("time grid must be strictly increasing")
        targets = [to_ticks(t / eps) + height_ticks for t in times]
        scale = math.sqrt(eps)
        values = np.empty(len(times))
        clock = height_ticks  # absolute suspension time of the next crossing
        s_phi = 0
        i = 0
        cur = state
        nxt, dphi, tau = self.base.step_with_data(cur)
        clock += roof_ticks(tau)
        for i, target in enumerate(targets):
            while clock <= target:
                s_phi += dphi
                cur = nxt
                nxt, dphi, tau = self.base.step_with_data(cur)
                clock += roof_ticks(tau)
            values[i] = scale * s_phi
        return PathSample(times=times, values=values.reshape(-1, 1),
                          meta={"eps": eps, "kind": "displacement"})


# ---------------------------------------------------------------------------
# billiard adapter
# ---------------------------------------------------------------------------


class BilliardSuspensionAdapter:
    """Suspension flow over the collision section, projected to the cylinder.

    Flowing in suspension coordinates and projecting must agree with direct
    event-driven evolution (to within the tick quantization of flight times,
    about 1.2e-10 per collision).
    """

    def __init__(self, table: geometry.BilliardTable):
        self.table = table
        self.base = BilliardSectionBase(table)
        self.flow = SuspensionFlow(self.base)

    def point_from_boundary(self, b: geometry.BoundaryState,
                            height: float = 0.0) -> SuspensionPoint:
        state = SectionState(b.obstacle_id, b.angle, b.vx, b.vy)
        return self.flow.point(state, b.cell, height)

    def to_phase(self, p: SuspensionPoint) -> geometry.PhasePoint:
        s = p.state
        o = self.table.obstacles[s.obstacle_id]
        h = from_ticks(p.height_ticks)
        px = o.cx + p.cell + o.r * math.cos(s.angle) + h * s.vx
        py = geometry.wrap01(o.cy + o.r * math.sin(s.angle) + h * s.vy)
        return geometry.PhasePoint(px, py, s.vx, s.vy)

    def flow_phase(self, p: SuspensionPoint, t: float) -> geometry.PhasePoint:
        return self.to_phase(self.flow.flow(p, t))
