"""Full-dynamics two-impulse transfers, primer-vector diagnostics and
concurrent re-optimisation of transfer times."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dynamics import (RotationCurve, ShipState, Star, StarCatalog, gravity_jacobian,
                       propagate_ship, propagate_with_stm, star_state, _solve, _rhs)
from .linrdv import SingularityError, from_rotating, relative_state, two_impulse_linear
from .tree import Solution, TransferLeg, VesselRules
from .units import KPC_PER_MYR_KMS, T_END

log = logging.getLogger(__name__)

SOLVER_TOL = 1e-9  # kpc terminal miss
PROP_TOL = 1e-11
PRIMER_EPS = 1e-3


class SolverError(RuntimeError):
    def __init__(self, message, residual=np.nan):
        super().__init__(f"{message} (residual {residual:.3e} kpc)")
        self.residual = residual


class TransferLimitError(ValueError):
    pass


class DegenerateBoundaryError(ValueError):
    pass


def _linear_guess(curve, star_a, star_b, t0, tf):
    va = star_state(curve, star_a, t0).velocity
    try:
        dr, dv, omega = relative_state(curve, star_a, star_b, t0)
        lt = two_impulse_linear(dr, dv, omega, tf - t0)
    except SingularityError:
        return va
    sb = star_state(curve, star_b, t0)
    _, vel = from_rotating(sb.position, sb.velocity, dr, lt.v0_plus)
    return vel


def shoot(curve: RotationCurve, r0, v_guess, t0: float, tf: float, r_target,
          tol: float = SOLVER_TOL, max_iter: int = 30, prop_tol: float = PROP_TOL):
    """Newton iteration on the departure velocity so the coast from ``r0`` hits
    ``r_target`` at ``tf``. Returns ``(v_dep, v_arr, miss)``."""
    v = np.array(v_guess, dtype=float)
    r_target = np.asarray(r_target, float)
    best = np.inf
    for _ in range(max_iter):
        yf, phi = propagate_with_stm(curve, np.concatenate([r0, v]), t0, tf, prop_tol)
        res = yf[:3] - r_target
        miss = float(np.linalg.norm(res))
        if miss < tol:
            return v, yf[3:].copy(), miss
        best = min(best, miss)
        try:
            step = np.linalg.solve(phi[:3, 3:], res)
        except np.linalg.LinAlgError:
            raise SolverError("singular shooting Jacobian", miss) from None
        # crude damping keeps long arcs from overshooting
        scale = 1.0
        step_norm = np.linalg.norm(step)
        vmag = np.linalg.norm(v)
        if step_norm > 0.5 * vmag:
            scale = 0.5 * vmag / step_norm
        v = v - scale * step
    raise SolverError("two-impulse shooting did not converge", best)


def solve_two_impulse(curve: RotationCurve, star_a: Star, star_b: Star, t0: float, tf: float,
                      tol: float = SOLVER_TOL, vessel_type: str = "settler",
                      rules: VesselRules | None = None, v_guess=None) -> TransferLeg:
    """Two-impulse rendezvous from ``star_a`` at ``t0`` to ``star_b`` at ``tf``.

    The departure velocity is found by Newton shooting with the variational
    STM, seeded from the linear rendezvous solution. When ``rules`` is given
    the leg is checked against the vessel limits.

    Raises:
        SolverError: if the shooting does not converge.
        TransferLimitError: if ``rules`` is given and a limit is exceeded.
    """
    if not tf > t0:
        raise ValueError("tf must be after t0")
    sa = star_state(curve, star_a, t0)
    sb = star_state(curve, star_b, tf)
    if star_a.id == star_b.id and star_a == star_b:
        v_dep, v_arr = sa.velocity, sb.velocity
    else:
        guess = _linear_guess(curve, star_a, star_b, t0, tf) if v_guess is None else v_guess
        v_dep, v_arr, _ = shoot(curve, sa.position, guess, t0, tf, sb.position, tol)
    dv0 = (v_dep - sa.velocity) * KPC_PER_MYR_KMS
    dvf = (sb.velocity - v_arr) * KPC_PER_MYR_KMS
    leg = TransferLeg(vessel_type, star_a.id, star_b.id, float(t0), float(tf),
                      [(float(t0), dv0), (float(tf), dvf)])
    if rules is not None:
        bad = leg.limit_violations(rules.limits(vessel_type))
        if bad:
            raise TransferLimitError(f"leg {star_a.id}->{star_b.id}: " + "; ".join(bad))
    return leg


def departure_velocity(curve, leg: TransferLeg, star_a: Star) -> np.ndarray:
    sa = star_state(curve, star_a, leg.t_dep)
    return sa.velocity + np.asarray(leg.impulses[0][1]) / KPC_PER_MYR_KMS


def fly_leg(curve: RotationCurve, leg: TransferLeg, star_a: Star, tol: float = PROP_TOL):
    """Re-propagate a leg from its origin star through every impulse.

    Returns the ship state at ``t_arr`` after the last impulse.
    """
    s = star_state(curve, star_a, leg.t_dep)
    pos, vel, t = s.position, s.velocity.copy(), leg.t_dep
    for epoch, dv in leg.impulses:
        if epoch > t:
            st = propagate_ship(curve, ShipState(pos, vel, t), epoch, tol)
            pos, vel, t = st.position, st.velocity, epoch
        vel = vel + np.asarray(dv, float) / KPC_PER_MYR_KMS
    if leg.t_arr > t:
        st = propagate_ship(curve, ShipState(pos, vel, t), leg.t_arr, tol)
        pos, vel = st.position, st.velocity
    return ShipState(pos, vel, leg.t_arr)


# --- primer vector ---------------------------------------------------------

@dataclass(frozen=True)
class PrimerHistory:
    epochs: np.ndarray
    lam_v: np.ndarray
    lam_r: np.ndarray
    max_interior: float
    eps: float = PRIMER_EPS

    @property
    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.lam_v, axis=1)

    @property
    def optimal(self) -> bool:
        """Two-impulse optimality test: interior primer magnitude never exceeds 1."""
        return self.max_interior <= 1.0 + self.eps


def _rhs_adjoint(curve):
    base = _rhs(curve)

    def f(t, y):
        dy = np.empty(42)
        dy[:6] = base(t, y[:6])
        psi = y[6:].reshape(6, 6)
        G = gravity_jacobian(curve, y[:3])
        d = np.empty((6, 6))
        d[:3] = -G @ psi[3:]  # lambda_r' = -G^T lambda_v, G symmetric
        d[3:] = -psi[:3]  # lambda_v' = -lambda_r
        dy[6:] = d.ravel()
        return dy

    return f


def primer_history(curve: RotationCurve, leg: TransferLeg, star_a: Star, samples: int = 101,
                   tol: float = 1e-12, eps: float = PRIMER_EPS) -> PrimerHistory:
    """Velocity-adjoint history along a two-impulse coast.

    The adjoint boundary-value problem with unit primer along each impulse at
    both ends is linear and is solved through the adjoint transition matrix.
    """
    if len(leg.impulses) != 2:
        raise ValueError("primer analysis needs exactly two impulses")
    (t0, dv0), (tf, dvf) = leg.impulses
    n0, nf = np.linalg.norm(dv0), np.linalg.norm(dvf)
    if n0 == 0.0 or nf == 0.0:
        raise DegenerateBoundaryError("zero-magnitude impulse has no primer direction")
    u0 = np.asarray(dv0) / n0
    uf = np.asarray(dvf) / nf
    s = star_state(curve, star_a, t0)
    y0 = np.concatenate([s.position, s.velocity + np.asarray(dv0) / KPC_PER_MYR_KMS,
                         np.eye(6).ravel()])
    sol = _solve(_rhs_adjoint(curve), t0, tf, y0, tol, dense=True)
    psi_f = sol.y[6:, -1].reshape(6, 6)
    lam_r0 = np.linalg.solve(psi_f[3:, :3], uf - psi_f[3:, 3:] @ u0)
    lam0 = np.concatenate([lam_r0, u0])
    ts = np.linspace(t0, tf, samples)
    lam = np.empty((samples, 6))
    for k, t in enumerate(ts):
        if k == 0:
            lam[k] = lam0
        elif k == samples - 1:
            lam[k] = psi_f @ lam0
        else:
            lam[k] = sol.sol(t)[6:].reshape(6, 6) @ lam0
    mags = np.linalg.norm(lam[:, 3:], axis=1)
    interior = float(mags[1:-1].max()) if samples > 2 else 1.0
    return PrimerHistory(ts, lam[:, 3:], lam[:, :3], interior, eps)


# --- concurrent time re-optimisation -------------------------------------

def leg_adjacency(legs) -> np.ndarray:
    """M[i, j] = 1 when the arrival star of leg i is the departure star of leg j."""
    n = len(legs)
    M = np.zeros((n, n), dtype=np.int64)
    dest = {leg.dest: i for i, leg in enumerate(legs)}
    for j, leg in enumerate(legs):
        i = dest.get(leg.origin)
        if i is not None:
            M[i, j] = 1
    return M


class _LegSolver:
    """Solves legs with warm starts keyed by leg index."""

    def __init__(self, curve, catalog, rules, tol):
        self.curve, self.catalog, self.rules, self.tol = curve, catalog, rules, tol
        self.guess = {}

    def __call__(self, j, leg, t0, tf, check=False):
        a = self.catalog.star(leg.origin)
        b = self.catalog.star(leg.dest)
        g = self.guess.get(j)
        try:
            new = solve_two_impulse(self.curve, a, b, t0, tf, self.tol, leg.vessel_type,
                                    self.rules if check else None, v_guess=g)
        except SolverError:
            if g is None:
                raise
            new = solve_two_impulse(self.curve, a, b, t0, tf, self.tol, leg.vessel_type,
                                    self.rules if check else None)
        new.vessel_id = leg.vessel_id
        return new

    def remember(self, j, leg):
        self.guess[j] = departure_velocity(self.curve, leg, self.catalog.star(leg.origin))


QUAD_FLOOR = 1e-3  # km/s per Myr^2; keeps the model convex where curvature is not


def solve_box_qp(lin, quad, lo, hi, parent, tof, tof_min, tol=1e-10, max_sweeps=20000):
    """Time-shift QP: minimise sum(lin*d + quad*d^2/2) over the box with
    ``tof[j] + d[j] - d[parent[j]] >= tof_min`` for every child leg j.

    Solved exactly by dual coordinate ascent (Hildreth) on the constraint
    multipliers; curvature is floored at ``QUAD_FLOOR`` so the model is convex.
    """
    lin = np.asarray(lin, float)
    q = np.maximum(np.asarray(quad, float), QUAD_FLOOR)
    n = len(lin)
    # rows (i, j, bound): d[i] - d[j] <= bound, with -1 for "no variable"
    rows = [(i, -1, hi[i]) for i in range(n)] + [(-1, i, -lo[i]) for i in range(n)]
    rows += [(p, j, tof[j] - tof_min) for j, p in enumerate(parent) if p is not None]
    inv_q = 1.0 / q
    denom = [(inv_q[i] if i >= 0 else 0.0) + (inv_q[j] if j >= 0 else 0.0) for i, j, _ in rows]
    lam = np.zeros(len(rows))
    d = -lin * inv_q
    for _ in range(max_sweeps):
        change = 0.0
        for k, (i, j, b) in enumerate(rows):
            viol = (d[i] if i >= 0 else 0.0) - (d[j] if j >= 0 else 0.0) - b
            new = max(0.0, lam[k] + viol / denom[k])
            step = new - lam[k]
            if step == 0.0:
                continue
            lam[k] = new
            if i >= 0:
                d[i] -= inv_q[i] * step
                change = max(change, abs(inv_q[i] * step))
            if j >= 0:
                d[j] += inv_q[j] * step
                change = max(change, abs(inv_q[j] * step))
        if change < tol:
            break
    return np.clip(d, lo, hi)


@dataclass
class ReoptResult:
    solution: Solution
    history: list  # total dv per accepted iteration, km/s
    flagged: list


def reoptimize_times(curve: RotationCurve, solution: Solution, catalog: StarCatalog,
                     rules: VesselRules | None = None, delta_min: float = -0.2,
                     delta_max: float = 1.0, iters: int = 5, fd_step: float = 0.01,
                     tof_min: float = 0.5, max_halvings: int = 4,
                     tol: float = SOLVER_TOL, t_end: float = T_END) -> ReoptResult:
    """Sequential quadratic re-optimisation of all transfer times.

    Each iteration fits a per-leg quadratic ΔV model in departure and arrival
    time by central differences, solves the box-constrained QP for arrival
    shifts (departures follow the parent's arrival through the adjacency
    matrix), re-solves every leg and keeps the step only if total ΔV drops.
    """
    rules = rules or VesselRules()
    sol = solution.copy()
    legs = sol.legs
    n = len(legs)
    history = [sol.dv_used()]
    if n == 0:
        return ReoptResult(sol, history, [])
    M = leg_adjacency(legs)
    parent = [None] * n
    for i, j in zip(*np.nonzero(M)):
        parent[j] = int(i)
    solver = _LegSolver(curve, catalog, rules, tol)
    for j, leg in enumerate(legs):
        solver.remember(j, leg)
    h = fd_step
    for it in range(iters):
        dv = np.array([leg.dv_used for leg in legs])
        a0 = np.zeros(n)
        b0 = np.zeros(n)
        af = np.zeros(n)
        bf = np.zeros(n)
        for j, leg in enumerate(legs):
            t0, tf = leg.t_dep, leg.t_arr
            if parent[j] is not None:
                p0 = solver(j, leg, t0 + h, tf).dv_used
                m0 = solver(j, leg, t0 - h, tf).dv_used
                a0[j] = (p0 - m0) / (2 * h)
                b0[j] = (p0 - 2 * dv[j] + m0) / h**2
            pf = solver(j, leg, t0, tf + h).dv_used
            mf = solver(j, leg, t0, tf - h).dv_used
            af[j] = (pf - mf) / (2 * h)
            bf[j] = (pf - 2 * dv[j] + mf) / h**2
        lin = af.copy()
        quad = bf.copy()
        for j in range(n):
            if parent[j] is not None:
                lin[parent[j]] += a0[j]
                quad[parent[j]] += b0[j]
        tof = np.array([leg.t_arr - leg.t_dep for leg in legs])
        scale = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            lo = np.full(n, delta_min * scale)
            hi = np.array([min(delta_max * scale, t_end - leg.t_arr) for leg in legs])
            hi = np.maximum(hi, np.minimum(0.0, lo))
            lo = np.minimum(lo, hi)
            delta = solve_box_qp(lin, quad, lo, hi, parent, tof, tof_min)
            if np.max(np.abs(delta)) < 1e-10:
                break
            shift0 = M.T @ delta
            try:
                trial = [solver(j, leg, leg.t_dep + shift0[j], leg.t_arr + delta[j], check=True)
                         for j, leg in enumerate(legs)]
            except (SolverError, TransferLimitError) as exc:
                log.debug("iteration %d: step rejected (%s)", it, exc)
                scale *= 0.5
                continue
            total = sum(t.dv_used for t in trial)
            if total < history[-1]:
                legs[:] = trial
                for j, leg in enumerate(legs):
                    solver.remember(j, leg)
                history.append(total)
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
    sol.legs = legs
    flagged = []
    return ReoptResult(sol, history, flagged)


def push_terminal_settles(curve: RotationCurve, solution: Solution, catalog: StarCatalog,
                          rules: VesselRules | None = None, t_end: float = T_END,
                          tol: float = SOLVER_TOL) -> Solution:
    """Move the arrival of every terminal leg to the horizon where feasible."""
    rules = rules or VesselRules()
    sol = solution.copy()
    terminal = set(sol.terminal_stars())
    for k, leg in enumerate(sol.legs):
        if leg.dest not in terminal or leg.t_arr >= t_end:
            continue
        try:
            new = solve_two_impulse(curve, catalog.star(leg.origin), catalog.star(leg.dest),
                                    leg.t_dep, t_end, tol, leg.vessel_type, rules)
        except (SolverError, TransferLimitError):
            continue
        if new.dv_used <= leg.dv_used:
            new.vessel_id = leg.vessel_id
            sol.legs[k] = new
    return sol


def primer_report(curve, solution: Solution, catalog: StarCatalog, samples: int = 51):
    """Legs whose primer magnitude exceeds one in the interior."""
    flagged = []
    for leg in solution.legs:
        if len(leg.impulses) != 2:
            continue
        try:
            ph = primer_history(curve, leg, catalog.star(leg.origin), samples)
        except DegenerateBoundaryError:
            continue
        if not ph.optimal:
            flagged.append((leg.origin, leg.dest, ph.max_interior))
    return flagged
