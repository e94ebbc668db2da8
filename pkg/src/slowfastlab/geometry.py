"""Event-driven Z-periodic Lorentz gas on the cylinder R x T.

The scatterer configuration is a finite list of discs with centers in the
fundamental cell [0,1) x [0,1); the full obstacle set consists of all integer
translates (l, 0) along the cylinder axis (the torus direction wraps by
itself).  A point particle moves in straight lines at unit speed and reflects
specularly off the discs.  Everything here is exact double-precision geometry:
ray-circle intersections are closed form, and boundary points are stored as
(obstacle id, cell, angle) so repeated collisions do not drift off the circle.

Conventions
-----------
* Positions: qx is the unbounded axis coordinate, qy lives on [0,1).
* cell_index = floor(qx) is the integer cell label of a phase point.
* Time equals arc length (unit speed).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import IO, Iterable

GRAZING_TOL = 1e-12
_START_TOL = 1e-12  # minimum positive flight time accepted by the ray solver


class GeometryError(Exception):
    pass


class NoCollisionWithinBound(GeometryError):
    """Free flight exceeded the search cap (infinite-horizon or bad table)."""

    def __init__(self, point, cap):
        super().__init__(
            f"no collision within {cap} cell widths from "
            f"({point.qx:.6g},{point.qy:.6g}) direction ({point.vx:.6g},{point.vy:.6g})"
        )
        self.point = point
        self.cap = cap


@dataclass(frozen=True)
class Obstacle:
    """Disc scatterer with center in the fundamental cell."""

    cx: float
    cy: float
    r: float

    def __post_init__(self):
        if not (0.0 <= self.cx < 1.0 and 0.0 <= self.cy < 1.0):
            raise ValueError(f"obstacle center ({self.cx},{self.cy}) outside [0,1)^2")
        if not (0.0 < self.r < 0.5):
            # r < 1/2 keeps each disc disjoint from its own periodic images.
            raise ValueError(f"obstacle radius {self.r} not in (0, 0.5)")


@dataclass(frozen=True)
class PhasePoint:
    """Unit-speed phase point on the cylinder."""

    qx: float
    qy: float
    vx: float
    vy: float

    def __post_init__(self):
        speed2 = self.vx * self.vx + self.vy * self.vy
        if abs(speed2 - 1.0) > 2.5e-12:  # |v|-1 <= 1e-12 to first order
            raise ValueError(f"velocity ({self.vx},{self.vy}) is not unit speed")
        if not (0.0 <= self.qy < 1.0):
            raise ValueError(f"qy={self.qy} outside [0,1)")


@dataclass(frozen=True)
class BoundaryState:
    """Collision-section point: position on a disc, outgoing direction.

    The position is reconstructed as center + r*(cos angle, sin angle), so a
    long orbit never drifts off the circle.
    """

    obstacle_id: int
    cell: int
    angle: float
    vx: float
    vy: float


@dataclass(frozen=True)
class CollisionEvent:
    time: float
    point: PhasePoint  # post-reflection phase point
    obstacle_id: int
    cell: int
    boundary: BoundaryState


@dataclass(frozen=True)
class BilliardTable:
    obstacles: tuple[Obstacle, ...]
    horizon_bound: float = 10.0

    def __post_init__(self):
        if self.horizon_bound <= 0:
            raise ValueError("horizon_bound must be positive")

    # -- construction / serialization ------------------------------------

    @staticmethod
    def from_json(text: str) -> "BilliardTable":
        doc = json.loads(text)
        obstacles = tuple(
            Obstacle(float(o["cx"]), float(o["cy"]), float(o["r"]))
            for o in doc["obstacles"]
        )
        bound = float(doc.get("horizon_bound", 10.0))
        return BilliardTable(obstacles, bound)

    def to_json(self) -> str:
        return json.dumps(
            {
                "obstacles": [
                    {"cx": o.cx, "cy": o.cy, "r": o.r} for o in self.obstacles
                ],
                "horizon_bound": self.horizon_bound,
            },
            sort_keys=True,
        )

    # -- validation --------------------------------------------------------

    def disjointness_violations(self) -> list[str]:
        """Overlapping translate pairs; empty list means the table is valid.

        Radii are below 1/2, so only offsets in {-1,0,1}^2 can touch.
        """
        problems = []
        obs = self.obstacles
        for i, a in enumerate(obs):
            for k in range(i, len(obs)):
                b = obs[k]
                for dl in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        if i == k and dl == 0 and dj == 0:
                            continue
                        dist = math.hypot(b.cx + dl - a.cx, b.cy + dj - a.cy)
                        if dist <= a.r + b.r:
                            problems.append(
                                f"obstacles {i} and {k} overlap at offset ({dl},{dj}): "
                                f"distance {dist:.6g} <= {a.r + b.r:.6g}"
                            )
        return problems

    def contains(self, qx: float, qy: float, tol: float = 0.0) -> bool:
        """True if (qx, qy) lies strictly inside some obstacle translate."""
        fx = qx - math.floor(qx)
        for dl in (-1, 0, 1):
            for dj in (-1, 0, 1):
                for o in self.obstacles:
                    if math.hypot(fx - o.cx - dl, qy - o.cy - dj) < o.r - tol:
                        return True
        return False


def default_table() -> BilliardTable:
    """Two-disc finite-horizon configuration.

    A large disc on the lattice points blocks every corridor family except the
    axis-parallel ones; the small disc at the cell center closes those.
    """
    return BilliardTable(
        (Obstacle(0.0, 0.0, 0.45), Obstacle(0.5, 0.5, 0.2)), horizon_bound=3.0
    )


def cell_index(p: PhasePoint) -> int:
    return math.floor(p.qx)


def phase_from_boundary(table: BilliardTable, b: BoundaryState) -> PhasePoint:
    o = table.obstacles[b.obstacle_id]
    qx = o.cx + b.cell + o.r * math.cos(b.angle)
    qy = wrap01(o.cy + o.r * math.sin(b.angle))
    return PhasePoint(qx, qy, b.vx, b.vy)


# ---------------------------------------------------------------------------
# collision search
# ---------------------------------------------------------------------------


def _ray_disc_time(px, py, vx, vy, cx, cy, r):
    """Smallest flight time > _START_TOL to disc (cx,cy,r), or inf.

    Tangential passes (|<v,n>| < GRAZING_TOL at impact) count as no collision.
    The quadratic keeps the |v|^2 coefficient: assuming unit speed here would
    couple rounding drift in |v| back into the impact geometry, where it gets
    amplified by every subsequent reflection.
    """
    ex = px - cx
    ey = py - cy
    a = vx * vx + vy * vy
    b = ex * vx + ey * vy
    c = ex * ex + ey * ey - r * r
    disc = b * b - a * c
    if disc <= (GRAZING_TOL * r) ** 2:
        return math.inf
    t = (-b - math.sqrt(disc)) / a
    if t <= _START_TOL:
        return math.inf
    return t


def _search_columns(table, px, py, vx, vy, cap):
    """Best (time, obstacle_id, lc, jc) over obstacle translates within cap.

    Walks fundamental-cell columns l = floor(px), floor(px)+-1, ... in the
    direction of travel; inside each column's time window the crossed torus
    rows are enumerated, so steep and vertical rays stay O(path length).

    Callers pass px already reduced to [0,1) (with the integer cell tracked
    separately), so the arithmetic is identical in every cell and the dynamics
    is Z-equivariant bit for bit.
    """
    obstacles = table.obstacles
    best_t = math.inf
    best = None
    l0 = math.floor(px)
    max_cols = int(math.ceil(cap)) + 1

    if vx > 0.0:
        col_range = range(l0, l0 + max_cols + 1)
    elif vx < 0.0:
        col_range = range(l0, l0 - max_cols - 1, -1)
    else:
        col_range = range(l0, l0 + 1)

    for l in col_range:
        # time window [t_in, t_out] during which qx is inside column [l, l+1]
        if vx > 0.0:
            t_in = (l - px) / vx
            t_out = (l + 1 - px) / vx
        elif vx < 0.0:
            t_in = (l + 1 - px) / vx
            t_out = (l - px) / vx
        else:
            t_in, t_out = 0.0, cap
        t_in = max(t_in, 0.0)
        if t_in >= best_t or t_in > cap:
            break
        t_out = min(t_out, cap, best_t)
        if t_out < t_in:
            continue

        y_in = py + t_in * vy
        y_out = py + t_out * vy
        y_lo, y_hi = (y_in, y_out) if y_in <= y_out else (y_out, y_in)
        jc_lo = math.floor(y_lo - 1.5)
        jc_hi = math.floor(y_hi + 0.5) + 1
        for lc in (l - 1, l, l + 1):
            for jc in range(jc_lo, jc_hi + 1):
                for k, o in enumerate(obstacles):
                    t = _ray_disc_time(px, py, vx, vy, o.cx + lc, o.cy + jc, o.r)
                    if t < best_t:
                        best_t = t
                        best = (t, k, lc, jc)
    if best is None or best_t > cap:
        return None
    return best


def wrap01(y: float) -> float:
    y = y % 1.0
    return 0.0 if y >= 1.0 else y


def _boundary_from_hit(table, px, py, vx, vy, hit, base_cell) -> BoundaryState:
    t, k, lc, jc = hit
    o = table.obstacles[k]
    hx = px + t * vx
    hy = py + t * vy
    # normalize rather than divide by r: the impact point sits on the circle
    # only up to roundoff, and reflection is an isometry only for exact unit n
    nx = hx - (o.cx + lc)
    ny = hy - (o.cy + jc)
    nn = math.hypot(nx, ny)
    nx /= nn
    ny /= nn
    dot = vx * nx + vy * ny
    wx = vx - 2.0 * dot * nx
    wy = vy - 2.0 * dot * ny
    angle = math.atan2(hy - (o.cy + jc), hx - (o.cx + lc))
    return BoundaryState(k, base_cell + lc, angle, wx, wy)


def _collide(table, px, py, vx, vy, cap, origin_point, base_cell):
    """Search from a LOCAL point (px in [0,1), cell tracked in base_cell)."""
    hit = _search_columns(table, px, py, vx, vy, cap)
    if hit is None:
        raise NoCollisionWithinBound(origin_point, cap)
    return hit[0], _boundary_from_hit(table, px, py, vx, vy, hit, base_cell)


def next_collision(p: PhasePoint, table: BilliardTable, cap: float | None = None) -> CollisionEvent:
    """First collision of the ray from p, reflected.

    The search enumerates obstacle translates column by column out to `cap`
    cell widths (default: the table's horizon bound).  Raises
    NoCollisionWithinBound if the free flight exceeds the cap.
    """
    if cap is None:
        cap = table.horizon_bound
    if table.contains(p.qx, p.qy, tol=1e-9):
        raise GeometryError(f"phase point ({p.qx},{p.qy}) is inside an obstacle")
    base = math.floor(p.qx)
    t, boundary = _collide(table, p.qx - base, p.qy, p.vx, p.vy, cap, p, base)
    return CollisionEvent(t, phase_from_boundary(table, boundary),
                          boundary.obstacle_id, boundary.cell, boundary)


def collision_map(b: BoundaryState, table: BilliardTable, cap: float | None = None) -> tuple[BoundaryState, float]:
    """One step of the collision section map; returns (next state, flight time)."""
    if cap is None:
        cap = table.horizon_bound
    o = table.obstacles[b.obstacle_id]
    # outgoing rays only: <v, n> >= 0 at the starting boundary point
    if b.vx * math.cos(b.angle) + b.vy * math.sin(b.angle) < -GRAZING_TOL:
        raise GeometryError("boundary state has incoming velocity")
    # local coordinates: the integer cell never enters the float arithmetic
    px = o.cx + o.r * math.cos(b.angle)
    py = o.cy + o.r * math.sin(b.angle)
    t, nxt = _collide(table, px, py, b.vx, b.vy, cap,
                      phase_from_boundary(table, b), b.cell)
    return nxt, t


def evolve(p: PhasePoint, t: float, table: BilliardTable, cap: float | None = None) -> PhasePoint:
    """Flow the phase point for time t (free flights plus specular bounces)."""
    q, _ = evolve_with_events(p, t, table, cap, collect=False)
    return q


def evolve_with_events(
    p: PhasePoint,
    t: float,
    table: BilliardTable,
    cap: float | None = None,
    collect: bool = True,
) -> tuple[PhasePoint, list[CollisionEvent]]:
    """Like evolve, also returning the collision events encountered."""
    if t < 0:
        raise ValueError("evolution time must be nonnegative")
    if cap is None:
        cap = table.horizon_bound
    if table.contains(p.qx, p.qy, tol=1e-9):
        raise GeometryError(f"phase point ({p.qx},{p.qy}) is inside an obstacle")
    events: list[CollisionEvent] = []
    base = math.floor(p.qx)
    px, py, vx, vy = p.qx - base, p.qy, p.vx, p.vy
    elapsed = 0.0
    remaining = t
    while True:
        hit = _search_columns(table, px, py, vx, vy, cap)
        if hit is None or hit[0] > remaining:
            if hit is None and remaining > cap:
                raise NoCollisionWithinBound(
                    PhasePoint(base + px, wrap01(py), vx, vy), cap)
            qx = base + (px + remaining * vx)
            qy = wrap01(py + remaining * vy)
            return PhasePoint(qx, qy, vx, vy), events
        boundary = _boundary_from_hit(table, px, py, vx, vy, hit, base)
        elapsed += hit[0]
        remaining -= hit[0]
        if collect:
            events.append(
                CollisionEvent(elapsed, phase_from_boundary(table, boundary),
                               boundary.obstacle_id, boundary.cell, boundary)
            )
        o = table.obstacles[boundary.obstacle_id]
        base = boundary.cell
        px = o.cx + o.r * math.cos(boundary.angle)
        py = o.cy + o.r * math.sin(boundary.angle)
        vx, vy = boundary.vx, boundary.vy


# ---------------------------------------------------------------------------
# finite-horizon validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HorizonReport:
    ok: bool
    max_flight: float
    witness: tuple | None  # ((x, y), (vx, vy), reason)
    n_samples: int
    cap: float
    notes: str = ""


def _corridor_sweep(table: BilliardTable, max_direction: int):
    """Deterministic corridor scan over primitive directions (p,q).

    A corridor in direction (p,q) is a full line missing every disc; lines are
    classified by their offset along the unit normal, which is periodic with
    period 1/|(p,q)| for a primitive lattice direction.  Returns a witness
    (point, direction) for the first uncovered offset found, else None.
    """
    dirs = []
    for pp in range(0, max_direction + 1):
        for qq in range(-max_direction, max_direction + 1):
            if pp == 0 and qq <= 0:
                continue
            if pp == 0 and qq != 1:
                continue
            if qq == 0 and pp != 1:
                continue
            if pp > 0 and qq != 0 and math.gcd(pp, abs(qq)) != 1:
                continue
            dirs.append((pp, qq))
    for (pp, qq) in dirs:
        norm = math.hypot(pp, qq)
        ux, uy = pp / norm, qq / norm
        nx, ny = -uy, ux
        period = 1.0 / norm
        intervals = []
        covered_all = False
        for o in table.obstacles:
            center = o.cx * nx + o.cy * ny
            if 2 * o.r >= period:
                covered_all = True
                break
            lo = (center - o.r) % period
            hi = lo + 2 * o.r
            if hi <= period:
                intervals.append((lo, hi))
            else:
                intervals.append((lo, period))
                intervals.append((0.0, hi - period))
        if covered_all:
            continue
        intervals.sort()
        # find a gap in the union of intervals over [0, period)
        gap_at = None
        if not intervals:
            gap_at = 0.5 * period
        else:
            reach = 0.0
            for lo, hi in intervals:
                if lo > reach + 1e-15:
                    gap_at = 0.5 * (reach + lo)
                    break
                reach = max(reach, hi)
            if gap_at is None and reach < period - 1e-15:
                gap_at = 0.5 * (reach + period)
        if gap_at is not None:
            # a whole free line: offset gap_at along n
            point = (gap_at * nx, gap_at * ny)
            return (point, (ux, uy), f"corridor in direction ({pp},{qq})")
    return None


def validate_finite_horizon(
    table: BilliardTable,
    n_samples: int = 2000,
    cap: float | None = None,
    seed: int = 0,
    sweep_max_direction: int = 8,
) -> HorizonReport:
    """Sample free flights and scan for corridors.

    Sampling gives the observed maximum flight; the angular sweep over
    primitive lattice directions up to `sweep_max_direction` finds any
    corridor with a rational direction in that range (a deterministic
    fallback — an exact corridor decision procedure is out of scope).
    Failure is reported as a value naming a witness ray, never an exception.
    """
    from numpy.random import Generator, Philox  # local: keep module import-light

    if cap is None:
        cap = max(10.0, table.horizon_bound)
    if not table.obstacles:
        return HorizonReport(False, math.inf, ((0.5, 0.5), (1.0, 0.0), "empty table"),
                             0, cap, "no obstacles: every ray is an infinite flight")
    witness = _corridor_sweep(table, sweep_max_direction)
    if witness is not None:
        return HorizonReport(False, math.inf, witness, 0, cap,
                             "deterministic corridor sweep found a free line")

    gen = Generator(Philox(key=seed))
    max_flight = 0.0
    tries = 0
    found = 0
    while found < n_samples and tries < 50 * n_samples:
        tries += 1
        x = float(gen.random())
        y = float(gen.random())
        if table.contains(x, y):
            continue
        theta = 2.0 * math.pi * float(gen.random())
        p = PhasePoint(x, y, math.cos(theta), math.sin(theta))
        try:
            ev = next_collision(p, table, cap=cap)
        except NoCollisionWithinBound:
            return HorizonReport(False, math.inf, ((x, y), (p.vx, p.vy), "sampled flight exceeded cap"),
                                 found, cap, "")
        max_flight = max(max_flight, ev.time)
        found += 1
    ok = found == n_samples
    return HorizonReport(ok, max_flight, None, found, cap,
                         "sampled flights all within cap; corridor sweep clean" if ok else
                         "could not draw enough free-space samples")


# ---------------------------------------------------------------------------
# trajectory output
# ---------------------------------------------------------------------------


def trajectory_rows(
    table: BilliardTable, p: PhasePoint, t_final: float, sample_dt: float
) -> Iterable[tuple[float, float, float, float, float, int]]:
    """(t, qx, qy, vx, vy, cell) rows sampled every sample_dt up to t_final."""
    n = int(math.floor(t_final / sample_dt + 1e-12))
    q = p
    for i in range(n + 1):
        if i > 0:
            q = evolve(q, sample_dt, table)
        yield (i * sample_dt, q.qx, q.qy, q.vx, q.vy, cell_index(q))


def write_trajectory_csv(fh: IO[str], rows: Iterable[tuple]) -> None:
    fh.write("t,qx,qy,vx,vy,cell\n")
    for t, qx, qy, vx, vy, cell in rows:
        fh.write(f"{t:.17g},{qx:.17g},{qy:.17g},{vx:.17g},{vy:.17g},{cell}\n")
