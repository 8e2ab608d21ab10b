"""Hill-Clohessy-Wiltshire linear rendezvous.

The target star is the reference body on its circular orbit; the relative
frame is x radial, y along-track, z cross-track. Transfer costs come from the
closed-form two-impulse rendezvous, and minimum-time transfers are found with a
line search on a 1-Myr grid of flight times.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import RotationCurve, Star, StarCatalog, circular_velocity, star_state
from .units import KPC_PER_MYR_KMS, T_END

SINGULAR_TOL = 1e-12


class SingularityError(ValueError):
    """N(tau) is singular: no two-impulse solution at this flight time."""


@dataclass(frozen=True)
class HcwStm:
    M: np.ndarray
    N: np.ndarray
    S: np.ndarray
    T: np.ndarray
    omega: float
    tau: float

    @property
    def matrix(self) -> np.ndarray:
        return np.block([[self.M, self.N], [self.S, self.T]])


def _stm_blocks(omega, tau):
    """Batched STM blocks; ``omega`` and ``tau`` broadcast, result (..., 3, 3)."""
    w, t = np.broadcast_arrays(np.asarray(omega, float), np.asarray(tau, float))
    wt = w * t
    s, c = np.sin(wt), np.cos(wt)
    z = np.zeros_like(wt)
    o = np.ones_like(wt)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    M = mat([[4 - 3 * c, z, z], [6 * (s - wt), o, z], [z, z, c]])
    N = mat([[s / w, 2 * (1 - c) / w, z],
             [-2 * (1 - c) / w, 4 * s / w - 3 * t, z],
             [z, z, s / w]])
    # (2,1) entry from the linearised equations of motion; see semigroup tests
    S = mat([[3 * w * s, z, z], [-6 * w * (1 - c), z, z], [z, z, -w * s]])
    T = mat([[c, 2 * s, z], [-2 * s, 4 * c - 3, z], [z, z, c]])
    return M, N, S, T


def hcw_stm(omega: float, tau: float) -> HcwStm:
    if omega <= 0:
        raise ValueError("omega must be positive")
    M, N, S, T = _stm_blocks(omega, tau)
    return HcwStm(M, N, S, T, float(omega), float(tau))


@dataclass(frozen=True)
class LinearTransfer:
    """Two-impulse linear rendezvous. Impulses in km/s, ``tau`` in Myr."""

    dv0: np.ndarray
    dvf: np.ndarray
    dv_total: float
    tau: float
    # post-impulse relative velocity, kpc/Myr (rotating frame of the target)
    v0_plus: np.ndarray = field(repr=False, default=None)


def two_impulse_linear(dr0, dv0, omega: float, tau: float) -> LinearTransfer:
    """Closed-form two-impulse rendezvous from relative state (dr0, dv0).

    Raises:
        SingularityError: when N(tau) cannot be inverted.
    """
    dr0 = np.asarray(dr0, dtype=float)
    dv0 = np.asarray(dv0, dtype=float)
    M, N, S, T = _stm_blocks(omega, tau)
    if abs(np.linalg.det(N * omega)) < SINGULAR_TOL:
        raise SingularityError(f"N(tau) singular at omega*tau={omega * tau:.6g}")
    v0p = -np.linalg.solve(N, M @ dr0)
    vfm = S @ dr0 + T @ v0p
    imp0 = (v0p - dv0) * KPC_PER_MYR_KMS
    impf = -vfm * KPC_PER_MYR_KMS
    total = float(np.linalg.norm(imp0) + np.linalg.norm(impf))
    return LinearTransfer(imp0, impf, total, float(tau), v0p)


def rotating_basis(pos, vel):
    """Rows x (radial), y (along-track), z (orbit normal) of the target frame,
    plus the angular-velocity vector."""
    pos = np.asarray(pos, float)
    vel = np.asarray(vel, float)
    h = np.cross(pos, vel)
    r2 = np.sum(pos * pos, axis=-1, keepdims=True)
    xh = pos / np.sqrt(r2)
    zh = h / np.linalg.norm(h, axis=-1, keepdims=True)
    yh = np.cross(zh, xh)
    R = np.stack([xh, yh, zh], axis=-2)
    return R, h / r2


def to_rotating(target_pos, target_vel, pos, vel):
    """Relative state of (pos, vel) in the target's rotating frame."""
    R, w = rotating_basis(target_pos, target_vel)
    d = np.asarray(pos, float) - np.asarray(target_pos, float)
    dv = np.asarray(vel, float) - np.asarray(target_vel, float) - np.cross(w, d)
    dr = np.einsum("...ij,...j->...i", R, d)
    dvr = np.einsum("...ij,...j->...i", R, dv)
    return dr, dvr


def from_rotating(target_pos, target_vel, dr, dv):
    """Inverse of :func:`to_rotating`; returns inertial (pos, vel)."""
    R, w = rotating_basis(target_pos, target_vel)
    d = np.einsum("...ji,...j->...i", R, np.asarray(dr, float))
    vrel = np.einsum("...ji,...j->...i", R, np.asarray(dv, float))
    pos = np.asarray(target_pos, float) + d
    vel = np.asarray(target_vel, float) + vrel + np.cross(w, d)
    return pos, vel


@dataclass(frozen=True)
class ThresholdTable:
    """Flight-time bands of (tau_upper, single-impulse max, total max).

    A band applies when ``tau < tau_upper``; the last row has ``tau_upper =
    inf`` and catches everything else. Limits are strict.
    """

    rows: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        rows = tuple((float(a), float(b), float(c)) for a, b, c in self.rows)
        uppers = [r[0] for r in rows]
        if not rows or any(b <= a for a, b in zip(uppers, uppers[1:])):
            raise ValueError("tau_upper must be strictly increasing")
        if not math.isinf(uppers[-1]):
            raise ValueError("last threshold row must be open-ended (inf)")
        object.__setattr__(self, "rows", rows)

    @classmethod
    def default(cls) -> ThresholdTable:
        return cls(((4.0, 170.0, 340.0), (9.0, 175.0, 350.0),
                    (15.0, 190.0, 360.0), (math.inf, 300.0, 400.0)))

    @classmethod
    def constant(cls, dv_i_max: float, dv_tot_max: float) -> ThresholdTable:
        return cls(((math.inf, dv_i_max, dv_tot_max),))

    def band(self, tau: float):
        for upper, i_max, tot_max in self.rows:
            if tau < upper:
                return i_max, tot_max
        raise AssertionError("unreachable: last band is open-ended")

    def band_arrays(self, taus):
        taus = np.asarray(taus, float)
        i_max = np.empty_like(taus)
        tot = np.empty_like(taus)
        for k, t in enumerate(taus):
            i_max[k], tot[k] = self.band(t)
        return i_max, tot

    def accepts(self, tau: float, lt: LinearTransfer) -> bool:
        i_max, tot_max = self.band(tau)
        return (np.linalg.norm(lt.dv0) < i_max and np.linalg.norm(lt.dvf) < i_max
                and lt.dv_total < tot_max)

    def to_list(self):
        return [[None if math.isinf(a) else a, b, c] for a, b, c in self.rows]

    @classmethod
    def from_list(cls, rows) -> ThresholdTable:
        return cls(tuple((math.inf if a is None else a, b, c) for a, b, c in rows))


def relative_state(curve: RotationCurve, star_a: Star, star_b: Star, t: float):
    """Relative state of ``star_a`` in ``star_b``'s frame, plus b's angular rate."""
    sa = star_state(curve, star_a, t)
    sb = star_state(curve, star_b, t)
    dr, dv = to_rotating(sb.position, sb.velocity, sa.position, sa.velocity)
    omega = circular_velocity(curve, star_b.r) / star_b.r
    return dr, dv, omega


def min_time_transfer(curve: RotationCurve, star_a: Star, star_b: Star, t_dep: float,
                      thresholds: ThresholdTable | None = None, t_end: float = T_END):
    """Smallest grid flight time whose linear transfer passes its threshold band.

    Returns ``(tau, LinearTransfer)`` or ``None``. Singular grid times are skipped.
    """
    thresholds = thresholds or ThresholdTable.default()
    dr, dv, omega = relative_state(curve, star_a, star_b, t_dep)
    tau = 1.0
    while t_dep + tau <= t_end + 1e-9:
        try:
            lt = two_impulse_linear(dr, dv, omega, tau)
        except SingularityError:
            tau += 1.0
            continue
        if thresholds.accepts(tau, lt):
            return tau, lt
        tau += 1.0
    return None


def min_time_batch(curve: RotationCurve, catalog: StarCatalog, origin: int, targets,
                   t_dep: float, thresholds: ThresholdTable, t_end: float = T_END,
                   inclusive: bool = False):
    """Vectorised minimum-time search from one origin to many targets.

    Returns arrays ``(tau, dv_total)`` with ``tau = nan`` where no grid time
    qualifies. With ``inclusive`` the limits are treated as ``<=`` (vessel caps)
    rather than the strict threshold-band comparison.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n = len(targets)
    out_tau = np.full(n, np.nan)
    out_dv = np.full(n, np.nan)
    taus = np.arange(1.0, math.floor(t_end - t_dep + 1e-9) + 1.0)
    if n == 0 or len(taus) == 0:
        return out_tau, out_dv
    ia = catalog.indices([origin])
    ib = catalog.indices(targets)
    pa, va = catalog.states(curve, t_dep, ia)
    pb, vb = catalog.states(curve, t_dep, ib)
    dr, dv = to_rotating(pb, vb, pa, va)
    omega = circular_velocity(curve, catalog.r[ib]) / catalog.r[ib]
    M, N, S, T = _stm_blocks(omega[:, None], taus[None, :])
    det = np.linalg.det(N * omega[:, None, None, None])
    ok = np.abs(det) >= SINGULAR_TOL
    N_safe = np.where(ok[..., None, None], N, np.eye(3))
    rhs = np.einsum("nmij,nj->nmi", M, dr)
    v0p = -np.linalg.solve(N_safe, rhs[..., None])[..., 0]
    vfm = np.einsum("nmij,nj->nmi", S, dr) + np.einsum("nmij,nmj->nmi", T, v0p)
    d0 = np.linalg.norm(v0p - dv[:, None, :], axis=-1) * KPC_PER_MYR_KMS
    df = np.linalg.norm(vfm, axis=-1) * KPC_PER_MYR_KMS
    i_max, tot_max = thresholds.band_arrays(taus)
    if inclusive:
        eps = 1e-9
        feas = (d0 <= i_max + eps) & (df <= i_max + eps) & (d0 + df <= tot_max + eps)
    else:
        feas = (d0 < i_max) & (df < i_max) & (d0 + df < tot_max)
    feas &= ok
    any_ok = feas.any(axis=1)
    first = np.argmax(feas, axis=1)
    rows = np.nonzero(any_ok)[0]
    out_tau[rows] = taus[first[rows]]
    out_dv[rows] = (d0 + df)[rows, first[rows]]
    return out_tau, out_dv


@dataclass(frozen=True)
class Neighborhood:
    """Minimum-time reachable stars from ``origin`` departing at ``epoch``."""

    origin: int
    epoch: float
    targets: np.ndarray
    tau: np.ndarray
    dv: np.ndarray

    def __len__(self):
        return len(self.targets)

    def entries(self):
        return list(zip(self.targets.tolist(), self.tau.tolist(), self.dv.tolist()))


class NeighborhoodCache:
    """Neighborhoods keyed by (origin star id, departure epoch)."""

    def __init__(self, thresholds: ThresholdTable | None = None, t_end: float = T_END,
                 meta: dict | None = None):
        self.thresholds = thresholds or ThresholdTable.default()
        self.t_end = t_end
        self.meta = dict(meta or {})
        self._data: dict[tuple[int, int], Neighborhood] = {}

    def __len__(self):
        return len(self._data)

    def __contains__(self, key):
        return (int(key[0]), int(round(key[1]))) in self._data

    def keys(self):
        return sorted(self._data)

    def add(self, nb: Neighborhood) -> None:
        self._data[(int(nb.origin), int(round(nb.epoch)))] = nb

    def get(self, origin, epoch) -> Neighborhood | None:
        return self._data.get((int(origin), int(round(epoch))))

    def save(self, directory) -> None:
        """One ``.npz`` shard per departure epoch plus ``manifest.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        epochs = sorted({e for _, e in self._data})
        shards = {}
        for e in epochs:
            nbs = [self._data[k] for k in self.keys() if k[1] == e]
            counts = np.array([len(nb) for nb in nbs], dtype=np.int64)
            name = f"epoch_{e:03d}.npz"
            np.savez(d / name,
                     origins=np.array([nb.origin for nb in nbs], dtype=np.int64),
                     counts=counts,
                     targets=np.concatenate([nb.targets for nb in nbs]).astype(np.int64),
                     tau=np.concatenate([nb.tau for nb in nbs]).astype(float),
                     dv=np.concatenate([nb.dv for nb in nbs]).astype(float))
            shards[str(e)] = name
        manifest = {"format": 1, "t_end": self.t_end,
                    "thresholds": self.thresholds.to_list(), "meta": self.meta,
                    "shards": shards}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory) -> NeighborhoodCache:
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        cache = cls(ThresholdTable.from_list(manifest["thresholds"]), manifest["t_end"],
                    manifest.get("meta"))
        for e, name in manifest["shards"].items():
            with np.load(d / name) as z:
                offsets = np.concatenate([[0], np.cumsum(z["counts"])])
                for k, o in enumerate(z["origins"]):
                    sl = slice(offsets[k], offsets[k + 1])
                    cache.add(Neighborhood(int(o), float(e), z["targets"][sl].copy(),
                                           z["tau"][sl].copy(), z["dv"][sl].copy()))
        return cache


def neighborhood(curve, catalog, origin, targets, epoch, thresholds, t_end=T_END):
    targets = np.asarray([t for t in targets if int(t) != int(origin)], dtype=np.int64)
    tau, dv = min_time_batch(curve, catalog, origin, targets, epoch, thresholds, t_end)
    keep = ~np.isnan(tau)
    return Neighborhood(int(origin), float(epoch), targets[keep], tau[keep], dv[keep])


def _build_chunk(args):
    curve, catalog, jobs, targets, thresholds, t_end = args
    return [neighborhood(curve, catalog, o, targets, e, thresholds, t_end) for o, e in jobs]


def build_neighborhoods(curve: RotationCurve, catalog: StarCatalog, targets, epochs,
                        thresholds: ThresholdTable | None = None, origins=None,
                        t_end: float = T_END, workers: int = 1,
                        meta: dict | None = None) -> NeighborhoodCache:
    """Precompute neighborhoods for every (origin, epoch) pair.

    ``targets`` is the zone filter: only these stars appear in neighborhoods.
    ``origins`` defaults to the targets themselves.
    """
    thresholds = thresholds or ThresholdTable.default()
    targets = [int(t) for t in targets]
    origins = targets if origins is None else [int(o) for o in origins]
    epochs = [int(e) for e in epochs]
    if any(e < 0 or e > t_end for e in epochs):
        raise ValueError("epoch grid must lie within [0, t_end]")
    cache = NeighborhoodCache(thresholds, t_end, meta)
    if not targets:
        return cache
    jobs = [(o, e) for o in origins for e in epochs if e + 1 <= t_end]
    if workers <= 1:
        for o, e in jobs:
            cache.add(neighborhood(curve, catalog, o, targets, e, thresholds, t_end))
        return cache
    chunks = [jobs[k::workers] for k in range(workers)]
    with ProcessPoolExecutor(workers) as pool:
        for nbs in pool.map(_build_chunk, [(curve, catalog, c, targets, thresholds, t_end)
                                           for c in chunks]):
            for nb in nbs:
                cache.add(nb)
    return cache


@dataclass
class MobilityMap:
    """Reachable (dr, dtheta_f) displacements for each flight time."""

    r0: float
    t0: float
    taus: list
    reachable: dict  # tau -> set of (dr, dtheta_f)

    def rows(self):
        for tau in self.taus:
            for dr, dth in sorted(self.reachable[tau]):
                yield tau, dr, dth

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("tau,dr,dtheta_f\n")
            for tau, dr, dth in self.rows():
                fh.write(f"{tau:g},{dr:.6g},{dth:.6g}\n")


def mobility_map(curve: RotationCurve, r0: float, t0: float, taus,
                 dv_i_max: float, dv_tot_max: float,
                 dr_grid=None, dtheta_grid=None, t_end: float = T_END) -> MobilityMap:
    """Reachable set within each flight time for a vessel departing radius ``r0``.

    A grid point counts as reachable at ``tau`` if some grid flight time
    ``<= tau`` meets the vessel limits (inclusive).
    """
    if not 2.0 <= r0 <= 32.0:
        raise ValueError("r0 must lie in [2, 32] kpc")
    taus = sorted(float(t) for t in taus)
    if not taus:
        return MobilityMap(r0, t0, [], {})
    if dr_grid is None:
        dr_grid = np.round(np.arange(-3.0, 3.0 + 1e-9, 0.1), 10)
    if dtheta_grid is None:
        dtheta_grid = np.round(np.arange(-0.3, 0.3 + 1e-9, 0.01), 10)
    dr_grid = np.asarray(dr_grid, float)
    dtheta_grid = np.asarray(dtheta_grid, float)
    w0 = circular_velocity(curve, r0) / r0
    theta_f0 = w0 * (t_end - t0)
    DR, DT = np.meshgrid(dr_grid, dtheta_grid, indexing="ij")
    rb = r0 + DR.ravel()
    inside = (rb >= 2.0) & (rb <= 32.0)
    rb_in = rb[inside]
    wb = circular_velocity(curve, rb_in) / rb_in
    phi_b = theta_f0 + DT.ravel()[inside] - wb * t_end
    ids = np.arange(1, len(rb_in) + 2)
    cat = StarCatalog(ids, np.concatenate([[r0], rb_in]), phi0=np.concatenate([[-w0 * t0], phi_b]))
    table = ThresholdTable.constant(dv_i_max, dv_tot_max)
    tau_min, _ = min_time_batch(curve, cat, 1, ids[1:], t0, table, t0 + max(taus),
                                inclusive=True)
    pts = np.stack([DR.ravel()[inside], DT.ravel()[inside]], axis=1)
    reach = {}
    for tau in taus:
        mask = tau_min <= tau + 1e-9
        reach[tau] = {(float(a), float(b)) for a, b in pts[mask]}
    return MobilityMap(r0, t0, taus, reach)
