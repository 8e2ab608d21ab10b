"""Merit function, target distributions and full rules validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import StarCatalog, star_state
from .transfer import fly_leg
from .tree import Solution, VesselRules
from .units import N_RINGS, N_SLICES, R_MAX, R_MIN, T_END

MISS_TOL = 1e-5  # kpc
VEL_TOL = 1e-5  # kpc/Myr


def triangular_kernel(x, mu, s):
    d = np.abs(np.asarray(x, float) - np.asarray(mu, float))
    return np.where(d >= s, 0.0, 1.0 / s - d / (s * s))


def default_g_r(r):
    return 2.0 * np.asarray(r, float) / (R_MAX**2 - R_MIN**2)


def default_g_theta(theta):
    return np.full_like(np.asarray(theta, float), 1.0 / (2 * np.pi))


@dataclass
class DensityErrorConfig:
    s_r: float = 1.0
    s_theta: float = np.pi / 16
    radial_points: np.ndarray = field(default_factory=lambda: R_MIN + np.arange(31.0))
    angular_points: np.ndarray = field(
        default_factory=lambda: -np.pi + np.arange(32.0) * np.pi / 16)
    g_r: np.ndarray | None = None
    g_theta: np.ndarray | None = None

    def __post_init__(self):
        self.radial_points = np.asarray(self.radial_points, float)
        self.angular_points = np.asarray(self.angular_points, float)
        if self.g_r is None:
            self.g_r = default_g_r(self.radial_points)
        if self.g_theta is None:
            self.g_theta = default_g_theta(self.angular_points)
        self.g_r = np.asarray(self.g_r, float)
        self.g_theta = np.asarray(self.g_theta, float)
        if np.any(self.g_r <= 0) or np.any(self.g_theta <= 0):
            raise ValueError("target densities must be strictly positive")

    def g_r_at(self, r):
        """Target radial density, interpolated between evaluation points."""
        return np.interp(r, self.radial_points, self.g_r)

    @classmethod
    def from_dict(cls, d: dict) -> DensityErrorConfig:
        return cls(**{k: v for k, v in d.items()
                      if k in ("s_r", "s_theta", "g_r", "g_theta")})


def density_error(values, points, s: float, g, wrap: bool = False) -> float:
    """Sum over evaluation points of (f(X_k) / g(X_k) - 1)^2, where f is the
    triangular-kernel density estimate of ``values``."""
    values = np.asarray(values, float)
    points = np.asarray(points, float)
    if values.size == 0:
        raise ValueError("density error needs at least one value")
    d = np.abs(points[:, None] - values[None, :])
    if wrap:
        d = np.mod(d, 2 * np.pi)
        d = np.minimum(d, 2 * np.pi - d)
    k = np.where(d >= s, 0.0, 1.0 / s - d / (s * s))
    f = k.sum(axis=1) / values.size
    return float(np.sum((f / np.asarray(g, float) - 1.0) ** 2))


def j2(n: int, e_r: float, e_theta: float) -> float:
    return n / (1.0 + 1e-4 * n * (e_r + e_theta))


def uniformity(radii, theta_f, config: DensityErrorConfig | None = None):
    """(E_r, E_theta, J2) of a set of stars."""
    config = config or DensityErrorConfig()
    e_r = density_error(radii, config.radial_points, config.s_r, config.g_r)
    e_t = density_error(theta_f, config.angular_points, config.s_theta, config.g_theta,
                        wrap=True)
    return e_r, e_t, j2(len(radii), e_r, e_t)


@dataclass
class MeritReport:
    N: int
    E_r: float
    E_theta: float
    J2: float
    dv_used: float
    dv_max: float
    J3: float
    J: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def merit_from_values(n, e_r, e_theta, dv_used, dv_max) -> MeritReport:
    J2 = j2(n, e_r, e_theta)
    if dv_used > 0:
        J3 = dv_max / dv_used
    elif dv_max == 0:
        J3 = 1.0
    else:
        raise ValueError("zero ΔV used with employed vessels")
    return MeritReport(n, e_r, e_theta, J2, dv_used, dv_max, J3, J2 * J3)


def merit(curve, solution: Solution, catalog: StarCatalog, rules: VesselRules | None = None,
          config: DensityErrorConfig | None = None, t_end: float = T_END) -> MeritReport:
    """Score a solution. ``dv_max`` sums the budget of every employed vessel."""
    rules = rules or VesselRules()
    stars = solution.stars()
    if not stars:
        raise ValueError("merit undefined for an empty solution")
    idx = catalog.indices(stars)
    th = catalog.theta_final(curve, t_end)[idx]
    e_r, e_t, _ = uniformity(catalog.r[idx], th, config)
    dv_max = sum(rules.limits(leg.vessel_type).dv_total_max for leg in solution.legs)
    return merit_from_values(len(stars), e_r, e_t, solution.dv_used(), dv_max)


# --- validation -------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    kind: str
    message: str

    def __str__(self):
        return f"{self.kind}: {self.message}"


def validate(curve, solution: Solution, catalog: StarCatalog,
             rules: VesselRules | None = None, propagate: bool = True,
             miss_tol: float = MISS_TOL) -> list[Violation]:
    """All rule violations of ``solution``; an empty list means valid."""
    rules = rules or VesselRules()
    out: list[Violation] = []

    def add(kind, msg):
        out.append(Violation(kind, msg))

    t_end = rules.t_end
    eps = 1e-9

    seen = set()
    for s in solution.stars():
        if s in seen:
            add("duplicate settlement", f"star {s} settled more than once")
        seen.add(s)
        if s not in catalog:
            add("unknown star", f"star {s} not in catalog")
    for r in solution.roots:
        if not 0.0 <= r.epoch <= t_end + eps:
            add("horizon", f"root {r.star} settled at {r.epoch}")

    settle = solution.settle_epochs()
    parent = solution.parent()
    departures: dict[int, int] = {}
    for leg in solution.legs:
        tag = f"leg {leg.origin}->{leg.dest}"
        if leg.vessel_type == "settler":
            departures[leg.origin] = departures.get(leg.origin, 0) + 1
        if leg.origin not in settle:
            add("connectivity", f"{tag}: origin star not settled")
        elif leg.t_dep < settle[leg.origin] + rules.wait_time - eps:
            add("wait time", f"{tag}: departs {leg.t_dep - settle[leg.origin]:.4f} Myr "
                             f"after settling (< {rules.wait_time})")
        if leg.t_arr > t_end + eps or leg.t_dep < 0:
            add("horizon", f"{tag}: epochs [{leg.t_dep}, {leg.t_arr}] outside [0, {t_end}]")
        if not leg.t_arr > leg.t_dep:
            add("timing", f"{tag}: arrival not after departure")
        epochs = [t for t, _ in leg.impulses]
        if any(b < a for a, b in zip(epochs, epochs[1:])) or any(
                t < leg.t_dep - eps or t > leg.t_arr + eps for t in epochs):
            add("timing", f"{tag}: impulse epochs out of order or outside the leg")
        for msg in leg.limit_violations(rules.limits(leg.vessel_type)):
            add("impulse limits", f"{tag}: {msg}")
        if propagate and leg.origin in catalog and leg.dest in catalog and leg.impulses:
            try:
                end = fly_leg(curve, leg, catalog.star(leg.origin))
            except Exception as exc:  # propagation failure is itself a violation
                add("terminal miss", f"{tag}: propagation failed ({exc})")
                continue
            target = star_state(curve, catalog.star(leg.dest), leg.t_arr)
            miss = float(np.linalg.norm(end.position - target.position))
            if miss > miss_tol:
                add("terminal miss", f"{tag}: misses destination by {miss:.3e} kpc")
            vmiss = float(np.linalg.norm(end.velocity - target.velocity))
            if vmiss > VEL_TOL:
                add("velocity mismatch", f"{tag}: arrives with {vmiss:.3e} kpc/Myr "
                                         f"relative velocity")
    for s, n in departures.items():
        if n > rules.settlers_per_star:
            add("offspring cap", f"star {s} launches {n} settlers (> {rules.settlers_per_star})")

    roots = {r.star for r in solution.roots}
    for s in settle:
        cur, hops = s, 0
        while parent.get(cur) is not None and hops <= len(settle):
            cur = parent[cur]
            hops += 1
        if cur not in roots:
            add("connectivity", f"star {s} is not connected to a root")
    return out


# --- target distribution ----------------------------------------------------

@dataclass
class TargetDistribution:
    matrix: np.ndarray  # 30 x 32
    rows: np.ndarray
    cols: np.ndarray


def _largest_remainder(weights, total: int) -> np.ndarray:
    w = np.asarray(weights, float)
    exact = total * w / w.sum()
    base = np.floor(exact).astype(np.int64)
    rem = int(total - base.sum())
    # stable order: larger remainder first, ties to the later (outer) ring
    order = sorted(range(len(w)), key=lambda k: (-(exact[k] - base[k]), -k))
    base[order[:rem]] += 1
    return base


def target_distribution(n_multiple: int) -> TargetDistribution:
    """512*n stars: equal per slice, rows proportional to ring mid-radius."""
    if n_multiple < 1:
        raise ValueError("n_multiple must be >= 1")
    total = 512 * n_multiple
    mid = np.arange(1, N_RINGS + 1) + 1.5
    rows = _largest_remainder(mid, total)
    cols = np.full(N_SLICES, total // N_SLICES, dtype=np.int64)
    mat = np.zeros((N_RINGS, N_SLICES), dtype=np.int64)
    cursor = 0
    for k in range(N_RINGS):
        q, rem = divmod(int(rows[k]), N_SLICES)
        mat[k] += q
        # hand the remainder out round-robin so column totals stay equal
        for _ in range(rem):
            mat[k, cursor % N_SLICES] += 1
            cursor += 1
    return TargetDistribution(mat, rows, cols)
