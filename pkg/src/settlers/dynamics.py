"""Galactic rotation-curve model, circular star ephemerides and ship propagation.

Stars and ships move under a central acceleration of magnitude v_c(r)^2 / r,
where the circular speed is the reciprocal of an 8th-order polynomial in r.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate

from .units import R_MAX, R_MIN, T_END

DEFAULT_TOL = 1e-10
# Circular speed of the bundled flat curve, kpc/Myr (~220 km/s).
FLAT_V0 = 0.225

CATALOG_COLUMNS = ("id", "r_kpc", "i_rad", "Omega_rad", "phi0_rad")


class DomainError(ValueError):
    """Raised when a radius is outside the domain of the rotation curve."""


class IntegrationError(RuntimeError):
    pass


class CatalogParseError(ValueError):
    pass


@dataclass(frozen=True)
class RotationCurve:
    """Inverse-speed polynomial: v_c(r) = 1 / sum(k[i] * r**i)."""

    k: tuple[float, ...]

    def __post_init__(self):
        k = tuple(float(c) for c in self.k)
        if len(k) == 0 or len(k) > 9:
            raise ValueError("rotation curve needs 1..9 coefficients")
        object.__setattr__(self, "k", k + (0.0,) * (9 - len(k)))

    @classmethod
    def flat(cls, v0: float = FLAT_V0) -> RotationCurve:
        return cls((1.0 / v0,))

    @property
    def is_flat(self) -> bool:
        return all(c == 0.0 for c in self.k[1:])

    def inverse_speed(self, r):
        # Horner, highest power first
        p = 0.0
        for c in reversed(self.k):
            p = p * r + c
        return p

    def inverse_speed_derivative(self, r):
        p = 0.0
        for i in range(8, 0, -1):
            p = p * r + i * self.k[i]
        return p

    def to_json(self) -> str:
        return json.dumps({"k": list(self.k)})

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def load_curve(path) -> RotationCurve:
    data = json.loads(Path(path).read_text())
    return RotationCurve(tuple(data["k"]))


def save_curve(curve: RotationCurve, path) -> None:
    Path(path).write_text(curve.to_json() + "\n")


def circular_velocity(curve: RotationCurve, r):
    """Circular orbit speed at radius ``r`` (scalar or array), kpc/Myr."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr <= 0.0):
        raise DomainError("radius must be positive")
    p = curve.inverse_speed(r_arr)
    if np.any(p <= 0.0):
        raise DomainError("rotation-curve polynomial is non-positive")
    v = 1.0 / p
    return float(v) if np.ndim(v) == 0 else v


def _speed_scalar(curve: RotationCurve, r: float) -> float:
    p = curve.inverse_speed(r)
    if p <= 0.0 or r <= 0.0:
        raise DomainError(f"rotation curve undefined at r={r}")
    return 1.0 / p


def gravity(curve: RotationCurve, position) -> np.ndarray:
    """Central acceleration -(r_vec / r) * v_c(r)**2 / r."""
    pos = np.asarray(position, dtype=float)
    r = float(np.linalg.norm(pos))
    if r == 0.0:
        raise DomainError("gravity undefined at the galactic centre")
    v = _speed_scalar(curve, r)
    return -pos * (v * v / (r * r))


def gravity_jacobian(curve: RotationCurve, position) -> np.ndarray:
    """d(gravity)/d(position), a symmetric 3x3 matrix."""
    pos = np.asarray(position, dtype=float)
    r = float(np.linalg.norm(pos))
    if r == 0.0:
        raise DomainError("gravity undefined at the galactic centre")
    p = curve.inverse_speed(r)
    v = 1.0 / p
    dv = -curve.inverse_speed_derivative(r) * v * v
    h = v * v / (r * r)
    dh = 2.0 * v * dv / (r * r) - 2.0 * v * v / r**3
    u = pos / r
    return -h * np.eye(3) - r * dh * np.outer(u, u)


def potential(curve: RotationCurve, r: float, r_ref: float = 1.0) -> float:
    """Potential V with dV/dr = v_c^2 / r, zero at ``r_ref``."""
    if curve.is_flat:
        v0 = 1.0 / curve.k[0]
        return v0 * v0 * math.log(r / r_ref)
    val, _ = integrate.quad(lambda x: _speed_scalar(curve, x) ** 2 / x, r_ref, r,
                            epsabs=1e-14, epsrel=1e-13)
    return val


def specific_energy(curve: RotationCurve, position, velocity) -> float:
    v = np.asarray(velocity, dtype=float)
    return 0.5 * float(v @ v) + potential(curve, float(np.linalg.norm(position)))


@dataclass(frozen=True)
class Star:
    id: int
    r: float
    i: float = 0.0
    Omega: float = 0.0
    phi0: float = 0.0


@dataclass(frozen=True)
class ShipState:
    position: np.ndarray
    velocity: np.ndarray
    epoch: float

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


def _orbit_frame(i, Omega):
    """Columns: in-plane x axis, in-plane y axis of a rotated orbit plane."""
    ci, si = np.cos(i), np.sin(i)
    cO, sO = np.cos(Omega), np.sin(Omega)
    p_hat = np.stack([cO, sO, np.zeros_like(cO)], axis=-1)
    q_hat = np.stack([-sO * ci, cO * ci, si * np.ones_like(cO)], axis=-1)
    return p_hat, q_hat


def star_state(curve: RotationCurve, star: Star, t: float) -> ShipState:
    """Position and velocity of ``star`` on its circular orbit at epoch ``t``."""
    v = circular_velocity(curve, star.r)
    omega = v / star.r
    u = star.phi0 + omega * t
    p_hat, q_hat = _orbit_frame(star.i, star.Omega)
    pos = star.r * (math.cos(u) * p_hat + math.sin(u) * q_hat)
    vel = v * (-math.sin(u) * p_hat + math.cos(u) * q_hat)
    return ShipState(pos, vel, float(t))


class StarCatalog:
    """Column-oriented star catalog; rows are addressed by star id."""

    def __init__(self, ids, r, i=None, Omega=None, phi0=None):
        self.ids = np.asarray(ids, dtype=np.int64)
        n = len(self.ids)
        self.r = np.asarray(r, dtype=float)
        self.i = np.zeros(n) if i is None else np.asarray(i, dtype=float)
        self.Omega = np.zeros(n) if Omega is None else np.asarray(Omega, dtype=float)
        self.phi0 = np.zeros(n) if phi0 is None else np.asarray(phi0, dtype=float)
        if len(np.unique(self.ids)) != n:
            raise ValueError("star ids must be unique")
        self._index = {int(s): k for k, s in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, star_id) -> bool:
        return int(star_id) in self._index

    def index(self, star_id) -> int:
        return self._index[int(star_id)]

    def indices(self, star_ids) -> np.ndarray:
        return np.array([self._index[int(s)] for s in star_ids], dtype=np.int64)

    def star(self, star_id) -> Star:
        k = self._index[int(star_id)]
        return Star(int(self.ids[k]), float(self.r[k]), float(self.i[k]),
                    float(self.Omega[k]), float(self.phi0[k]))

    def stars(self):
        return [self.star(s) for s in self.ids]

    def subset(self, star_ids) -> StarCatalog:
        k = self.indices(star_ids)
        return StarCatalog(self.ids[k], self.r[k], self.i[k], self.Omega[k], self.phi0[k])

    def states(self, curve: RotationCurve, t, idx=None):
        """Vectorised positions and velocities, shape (n, 3) each."""
        sl = slice(None) if idx is None else idx
        r = self.r[sl]
        v = circular_velocity(curve, r)
        u = self.phi0[sl] + (v / r) * t
        p_hat, q_hat = _orbit_frame(self.i[sl], self.Omega[sl])
        cu, su = np.cos(u)[:, None], np.sin(u)[:, None]
        pos = r[:, None] * (cu * p_hat + su * q_hat)
        vel = np.asarray(v)[:, None] * (-su * p_hat + cu * q_hat)
        return pos, vel

    def theta_final(self, curve: RotationCurve, t_end: float = T_END) -> np.ndarray:
        pos, _ = self.states(curve, t_end)
        return np.arctan2(pos[:, 1], pos[:, 0])

    def to_csv_text(self) -> str:
        lines = [",".join(CATALOG_COLUMNS)]
        for k in range(len(self)):
            vals = (self.r[k], self.i[k], self.Omega[k], self.phi0[k])
            lines.append(f"{int(self.ids[k])}," + ",".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_csv_text().encode()).hexdigest()


def save_catalog(catalog: StarCatalog, path) -> None:
    Path(path).write_text(catalog.to_csv_text())


def load_catalog(path) -> StarCatalog:
    ids, cols = [], [[], [], [], []]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CATALOG_COLUMNS:
            raise CatalogParseError(f"line 1: expected header {','.join(CATALOG_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise CatalogParseError(f"line {lineno}: expected 5 fields, got {len(row)}")
            try:
                ids.append(int(row[0]))
                for c, val in zip(cols, row[1:]):
                    c.append(float(val))
            except ValueError as exc:
                raise CatalogParseError(f"line {lineno}: {exc}") from None
    return StarCatalog(ids, *cols)


def generate_catalog(n: int, seed: int, mode: str = "planar",
                     max_inclination: float = 0.1) -> StarCatalog:
    """Synthetic catalog with radial density proportional to r on [2, 32] kpc."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if mode not in ("planar", "inclined"):
        raise ValueError(f"unknown catalog mode {mode!r}")
    rng = np.random.default_rng(seed)
    # inverse CDF of a density linear in r
    r = np.sqrt(rng.uniform(R_MIN**2, R_MAX**2, size=n))
    phi0 = rng.uniform(0.0, 2.0 * np.pi, size=n)
    if mode == "planar":
        inc = np.zeros(n)
        node = np.zeros(n)
    else:
        inc = rng.uniform(0.0, max_inclination, size=n)
        node = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return StarCatalog(np.arange(1, n + 1), r, inc, node, phi0)


# --- propagation ---------------------------------------------------------

def _rhs(curve: RotationCurve):
    k = curve.k

    def f(t, y):
        x0, x1, x2 = y[0], y[1], y[2]
        r = math.sqrt(x0 * x0 + x1 * x1 + x2 * x2)
        p = 0.0
        for c in reversed(k):
            p = p * r + c
        if p <= 0.0 or r == 0.0:
            raise DomainError(f"rotation curve undefined at r={r}")
        h = 1.0 / (p * p * r * r)
        return np.array([y[3], y[4], y[5], -x0 * h, -x1 * h, -x2 * h])

    return f


def _rhs_stm(curve: RotationCurve):
    base = _rhs(curve)

    def f(t, y):
        dy = np.empty(42)
        dy[:6] = base(t, y[:6])
        phi = y[6:].reshape(6, 6)
        jac = gravity_jacobian(curve, y[:3])
        dphi = np.empty((6, 6))
        dphi[:3] = phi[3:]
        dphi[3:] = jac @ phi[:3]
        dy[6:] = dphi.ravel()
        return dy

    return f


def _solve(fun, t0, t1, y0, tol, dense=False):
    sol = integrate.solve_ivp(fun, (t0, t1), y0, method="DOP853", rtol=tol,
                              atol=tol * 1e-2, dense_output=dense)
    if sol.status != 0:
        raise IntegrationError(sol.message)
    return sol


def propagate_ship(curve: RotationCurve, state0: ShipState, t1: float,
                   tol: float = DEFAULT_TOL) -> ShipState:
    """Integrate the central-force equations of motion from ``state0`` to ``t1``.

    Backward propagation (``t1 < state0.epoch``) is allowed; it is used by the
    reversibility checks and time-reversed primer analysis.
    """
    if t1 == state0.epoch:
        return state0
    y0 = np.concatenate([state0.position, state0.velocity])
    sol = _solve(_rhs(curve), state0.epoch, t1, y0, tol)
    y = sol.y[:, -1]
    return ShipState(y[:3].copy(), y[3:].copy(), float(t1))


def propagate_with_stm(curve: RotationCurve, y0, t0: float, t1: float,
                       tol: float = DEFAULT_TOL):
    """Propagate a 6-state with its 6x6 variational state-transition matrix."""
    y = np.concatenate([np.asarray(y0, dtype=float), np.eye(6).ravel()])
    if t1 == t0:
        return y[:6], np.eye(6)
    sol = _solve(_rhs_stm(curve), t0, t1, y, tol)
    yf = sol.y[:, -1]
    return yf[:6].copy(), yf[6:].reshape(6, 6).copy()


def propagate_dense(curve: RotationCurve, y0, t0: float, t1: float,
                    tol: float = DEFAULT_TOL):
    """Dense-output solution object for sampling a coast arc."""
    return _solve(_rhs(curve), t0, t1, np.asarray(y0, dtype=float), tol, dense=True)


def angular_momentum(position, velocity) -> np.ndarray:
    return np.cross(position, velocity)


def check_curve_on_range(curve: RotationCurve, lo: float = R_MIN, hi: float = R_MAX,
                         samples: int = 3001) -> None:
    r = np.linspace(lo, hi, samples)
    if np.any(curve.inverse_speed(r) <= 0.0):
        raise DomainError("rotation-curve polynomial has a root on the catalog range")

