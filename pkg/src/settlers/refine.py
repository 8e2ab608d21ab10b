"""Post-search refinements: explosion, pruning and ring radius adjustment."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import StarCatalog
from .grid import CellMap
from .linrdv import ThresholdTable, min_time_batch
from .score import DensityErrorConfig, density_error, j2, triangular_kernel
from .transfer import SolverError, TransferLimitError, solve_two_impulse
from .tree import Solution, VesselRules
from .units import MAX_OFFSPRING, N_RINGS, N_SLICES, R_MIN, T_END, WAIT_TIME

log = logging.getLogger(__name__)


# --- explosion --------------------------------------------------------------

def explosion_bounds(solution: Solution, cells: CellMap, t_end: float = T_END,
                     t_w: float = WAIT_TIME, dt_avg: float = 6.0) -> np.ndarray:
    """Capacity estimate per cell: every free vessel starts a full ternary tree
    of ``floor((t_end - t) / (dt_avg + t_w))`` further generations."""
    x_max = np.zeros((N_RINGS, N_SLICES), dtype=np.int64)
    kids = solution.children()
    for s, t in solution.settle_epochs().items():
        n_a = MAX_OFFSPRING - len(kids.get(s, []))
        if n_a <= 0:
            continue
        n_gen = int(np.floor((t_end - t) / (dt_avg + t_w)))
        if n_gen < 0:
            continue
        k_r, k_t = cells.cell(s)
        x_max[k_r - 1, k_t - 1] += n_a * sum(3**k for k in range(n_gen + 1))
    return x_max


@dataclass
class ExplosionPlan:
    x: np.ndarray
    x_max: np.ndarray
    objective: int
    history: list = field(default_factory=list)  # objective after each phase


def explosion_objective(x, N0, n_r_des, n_t_des) -> int:
    tot = np.asarray(x) + np.asarray(N0)
    return int(np.abs(tot.sum(axis=1) - n_r_des).sum() + np.abs(tot.sum(axis=0) - n_t_des).sum())


def _step_gain(d):
    """Change of |d| when d grows by one, and when it shrinks by one."""
    return np.abs(d + 1) - np.abs(d), np.abs(d - 1) - np.abs(d)


def _greedy(x, x_max, dr, dc):
    while True:
        up_r, _ = _step_gain(dr)
        up_c, _ = _step_gain(dc)
        delta = up_r[:, None] + up_c[None, :]
        delta = np.where(x < x_max, delta, 1)
        best = delta.min()
        if best >= 0:
            return
        i, j = np.unravel_index(np.argmin(delta), delta.shape)  # first = lowest (k_r, k_t)
        x[i, j] += 1
        dr[i] += 1
        dc[j] += 1


def _exchange(x, x_max, dr, dc):
    """1-exchange: move one unit between cells, or drop one, while improving."""
    R, C = x.shape
    while True:
        up_r, dn_r = _step_gain(dr)
        up_c, dn_c = _step_gain(dc)
        row_move = dn_r[:, None] + up_r[None, :]
        np.fill_diagonal(row_move, 0)
        col_move = dn_c[:, None] + up_c[None, :]
        np.fill_diagonal(col_move, 0)
        # delta[a, b, c, d]: move from (a, b) to (c, d)
        delta = row_move[:, None, :, None] + col_move[None, :, None, :]
        src = x > 0
        dst = x < x_max
        ok = src[:, :, None, None] & dst[None, None, :, :]
        delta = np.where(ok, delta, 1)
        drop = np.where(src, dn_r[:, None] + dn_c[None, :], 1)
        if delta.min() < 0 and delta.min() <= drop.min():
            a, b, c, d = np.unravel_index(np.argmin(delta), delta.shape)
            x[a, b] -= 1
            x[c, d] += 1
            dr[a] -= 1
            dr[c] += 1
            dc[b] -= 1
            dc[d] += 1
        elif drop.min() < 0:
            a, b = np.unravel_index(np.argmin(drop), drop.shape)
            x[a, b] -= 1
            dr[a] -= 1
            dc[b] -= 1
        else:
            return


def _cancel_negative_cycles(x, x_max, dr, dc):
    """Exactness phase: cancel negative unit cycles in the residual flow graph
    source -> rows -> cells -> columns -> sink, whose arc costs are the
    marginal changes of the convex row and column deviations."""
    R, C = x.shape
    S, T = 0, R + C + 1
    n = R + C + 2
    while True:
        up_r, dn_r = _step_gain(dr)
        up_c, dn_c = _step_gain(dc)
        rows_used = x.sum(axis=1)
        cols_used = x.sum(axis=0)
        arcs = []
        for i in range(R):
            arcs.append((S, 1 + i, int(up_r[i])))
            if rows_used[i] > 0:
                arcs.append((1 + i, S, int(dn_r[i])))
        for j in range(C):
            arcs.append((1 + R + j, T, int(up_c[j])))
            if cols_used[j] > 0:
                arcs.append((T, 1 + R + j, int(dn_c[j])))
        for i in range(R):
            for j in range(C):
                if x[i, j] < x_max[i, j]:
                    arcs.append((1 + i, 1 + R + j, 0))
                if x[i, j] > 0:
                    arcs.append((1 + R + j, 1 + i, 0))
        arcs.append((T, S, 0))
        if x.sum() > 0:
            arcs.append((S, T, 0))
        cycle = _negative_cycle(n, arcs)
        if cycle is None:
            return
        for u, v in cycle:
            if 1 <= u <= R and R < v <= R + C:
                x[u - 1, v - 1 - R] += 1
            elif R < u <= R + C and 1 <= v <= R:
                x[v - 1, u - 1 - R] -= 1
            elif u == S and 1 <= v <= R:
                dr[v - 1] += 1
            elif 1 <= u <= R and v == S:
                dr[u - 1] -= 1
            elif R < u <= R + C and v == T:
                dc[u - 1 - R] += 1
            elif u == T and R < v <= R + C:
                dc[v - 1 - R] -= 1


def _negative_cycle(n, arcs):
    """Bellman-Ford from a virtual source; returns a negative cycle's arcs or None."""
    dist = [0] * n
    pred = [None] * n
    last = None
    for _ in range(n):
        last = None
        for u, v, w in arcs:
            if dist[u] + w < dist[v]:
                dist[v] = dist[u] + w
                pred[v] = (u, v)
                last = v
        if last is None:
            return None
    v = last
    for _ in range(n):
        v = pred[v][0]
    cycle, u = [], v
    while True:
        a = pred[u]
        cycle.append(a)
        u = a[0]
        if u == v:
            break
    return cycle[::-1]


def explosion_ilp(N0, n_r_des, n_t_des, x_max, exact: bool = True) -> ExplosionPlan:
    """Integer plan of extra stars per cell minimising row plus column deviations.

    Greedy increments (ties to the lowest cell) are followed by 1-exchange local
    search; with ``exact`` a final negative-cycle-cancelling pass proves
    optimality of the separable convex objective.
    """
    N0 = np.asarray(N0, dtype=np.int64)
    x_max = np.asarray(x_max, dtype=np.int64)
    n_r_des = np.asarray(n_r_des, dtype=np.int64)
    n_t_des = np.asarray(n_t_des, dtype=np.int64)
    if N0.shape != x_max.shape or N0.shape != (len(n_r_des), len(n_t_des)):
        raise ValueError("grid shapes do not conform")
    if np.any(x_max < 0):
        raise ValueError("capacity bounds must be non-negative")
    x = np.zeros_like(N0)
    dr = N0.sum(axis=1) - n_r_des
    dc = N0.sum(axis=0) - n_t_des
    history = [explosion_objective(x, N0, n_r_des, n_t_des)]
    _greedy(x, x_max, dr, dc)
    history.append(explosion_objective(x, N0, n_r_des, n_t_des))
    _exchange(x, x_max, dr, dc)
    history.append(explosion_objective(x, N0, n_r_des, n_t_des))
    if exact:
        _cancel_negative_cycles(x, x_max, dr, dc)
        history.append(explosion_objective(x, N0, n_r_des, n_t_des))
    return ExplosionPlan(x, x_max, history[-1], history)


@dataclass
class ExplosionResult:
    solution: Solution
    added: dict  # (k_r, k_t) -> stars added
    shortfall: dict  # (k_r, k_t) -> planned minus added


def _fertile(solution: Solution, stars, rules: VesselRules):
    kids = solution.children()
    settle = solution.settle_epochs()
    out = [s for s in stars if len(kids.get(s, [])) < rules.settlers_per_star
           and settle[s] + rules.wait_time + 1 <= rules.t_end]
    return sorted(out, key=lambda s: (settle[s], s))


def realize_explosion(curve, solution: Solution, plan: ExplosionPlan, catalog: StarCatalog,
                      cells: CellMap, rules: VesselRules | None = None,
                      thresholds: ThresholdTable | None = None) -> ExplosionResult:
    """Grow the tree inside each planned cell with minimum-time settler legs.

    Earliest-settled fertile stars launch first and new settlers are fertile at
    once. Legs are solved in full dynamics and kept only within vessel limits.
    """
    rules = rules or VesselRules()
    thresholds = thresholds or ThresholdTable.constant(rules.settler.dv_impulse_max,
                                                      rules.settler.dv_total_max)
    sol = solution.copy()
    added, shortfall = {}, {}
    by_cell: dict = {}
    for sid in catalog.ids.tolist():
        by_cell.setdefault(cells.cell(sid), []).append(sid)
    for i, j in zip(*np.nonzero(plan.x)):
        cell = (int(i) + 1, int(j) + 1)
        want = int(plan.x[i, j])
        got = 0
        rejected: set = set()
        while got < want:
            settled = set(sol.stars())
            free = [s for s in by_cell.get(cell, []) if s not in settled]
            origins = _fertile(sol, [s for s in by_cell.get(cell, []) if s in settled], rules)
            leg = None
            for o in origins:
                t_dep = sol.settle_epochs()[o] + rules.wait_time
                cand = [s for s in free if (o, s) not in rejected]
                if not cand:
                    continue
                tau, dv = min_time_batch(curve, catalog, o, cand, t_dep, thresholds,
                                         rules.t_end, inclusive=True)
                order = [k for k in np.lexsort((cand, dv, tau)) if not np.isnan(tau[k])]
                for k in order:
                    try:
                        leg = solve_two_impulse(curve, catalog.star(o), catalog.star(cand[k]),
                                                t_dep, t_dep + tau[k], rules=rules)
                        break
                    except (SolverError, TransferLimitError):
                        rejected.add((o, cand[k]))
                if leg is not None:
                    break
            if leg is None:
                break
            sol.legs.append(leg)
            got += 1
        added[cell] = got
        if got < want:
            shortfall[cell] = want - got
    sol.renumber_vessels()
    return ExplosionResult(sol, added, shortfall)


# --- pruning ----------------------------------------------------------------

@dataclass
class PruneResult:
    solution: Solution
    removed: list
    j2_history: list


def _kernel_matrices(radii, theta, config: DensityErrorConfig):
    Kr = triangular_kernel(config.radial_points[:, None], radii[None, :], config.s_r)
    d = np.abs(config.angular_points[:, None] - theta[None, :]) % (2 * np.pi)
    d = np.minimum(d, 2 * np.pi - d)
    Kt = np.where(d >= config.s_theta, 0.0,
                  1.0 / config.s_theta - d / config.s_theta**2)
    return Kr, Kt


def _errors_after_removal(Kr, Kt, cand, config):
    n = Kr.shape[1]
    fr = (Kr.sum(axis=1)[:, None] - Kr[:, cand]) / (n - 1)
    ft = (Kt.sum(axis=1)[:, None] - Kt[:, cand]) / (n - 1)
    e_r = ((fr / config.g_r[:, None] - 1.0) ** 2).sum(axis=0)
    e_t = ((ft / config.g_theta[:, None] - 1.0) ** 2).sum(axis=0)
    return e_r, e_t


def prune(curve, solution: Solution, catalog: StarCatalog,
          config: DensityErrorConfig | None = None, t_end: float = T_END) -> PruneResult:
    """Greedily drop the terminal star whose removal most improves J2."""
    config = config or DensityErrorConfig()
    sol = solution.copy()
    theta_all = catalog.theta_final(curve, t_end)
    stars = sol.stars()
    idx = catalog.indices(stars)
    e_r = density_error(catalog.r[idx], config.radial_points, config.s_r, config.g_r)
    e_t = density_error(theta_all[idx], config.angular_points, config.s_theta,
                        config.g_theta, wrap=True)
    history = [j2(len(stars), e_r, e_t)]
    removed = []
    while True:
        stars = sol.stars()
        terminal = sol.terminal_stars()
        if not terminal or len(stars) < 2:
            break
        idx = catalog.indices(stars)
        Kr, Kt = _kernel_matrices(catalog.r[idx], theta_all[idx], config)
        pos = {s: k for k, s in enumerate(stars)}
        cand = np.array([pos[s] for s in terminal])
        er, et = _errors_after_removal(Kr, Kt, cand, config)
        scores = j2(len(stars) - 1, er, et)
        k = int(np.argmax(scores))
        if not scores[k] > history[-1]:
            break
        sol.remove_terminal(terminal[k])
        removed.append(terminal[k])
        history.append(float(scores[k]))
    return PruneResult(sol, removed, history)


# --- adjust sequence --------------------------------------------------------

@dataclass
class AdjustResult:
    solution: Solution
    applied: bool
    removed: int | None
    added: int | None
    r_opt: float | None
    e_r_before: float
    e_r_after: float
    report: str


def optimal_radius(ring_lo: float, n: int, g_at_ring: float, s_tilde: float,
                   s_r: float = 1.0) -> float:
    """Radius that zeroes the ring-edge error term for one added star, clipped
    to the kernel's reach above the ring edge."""
    r = ring_lo + (1.0 - s_r * (n * g_at_ring - s_tilde)) * s_r
    return float(np.clip(r, ring_lo, ring_lo + s_r))


def adjust_sequence(curve, solution: Solution, catalog: StarCatalog, ring: int,
                    rules: VesselRules | None = None,
                    thresholds: ThresholdTable | None = None,
                    config: DensityErrorConfig | None = None,
                    max_candidates: int = 50) -> AdjustResult:
    """Replace one terminal star of ``ring`` (0-based, lower edge ``2 + ring``)
    by the reachable unsettled star nearest the error-zeroing radius."""
    if not 0 <= ring < N_RINGS:
        raise ValueError(f"ring index {ring} outside [0, {N_RINGS - 1}]")
    rules = rules or VesselRules()
    thresholds = thresholds or ThresholdTable.constant(rules.settler.dv_impulse_max,
                                                      rules.settler.dv_total_max)
    config = config or DensityErrorConfig()
    s_r = config.s_r
    lo = R_MIN + ring
    stars = solution.stars()
    radii = catalog.r[catalog.indices(stars)]
    e_before = density_error(radii, config.radial_points, s_r, config.g_r)

    def noop(msg, r_opt=None, removed=None):
        return AdjustResult(solution.copy(), False, removed, None, r_opt, e_before, e_before, msg)

    rad = dict(zip(stars, radii.tolist()))
    in_ring = [s for s in stars if lo <= rad[s] < lo + 1]
    cands = [s for s in solution.terminal_stars() if lo <= rad[s] < lo + 1]
    if not cands:
        return noop(f"ring {ring}: no terminal candidates")
    mean_r = float(np.mean([rad[s] for s in in_ring]))
    if mean_r > lo + 0.5:
        j = min(cands, key=lambda s: (rad[s], s))
    else:
        j = max(cands, key=lambda s: (rad[s], -s))
    sol = solution.copy()
    sol.remove_terminal(j)
    kept = np.array([rad[s] for s in stars if s != j])
    s_tilde = float(triangular_kernel(lo, kept, s_r).sum())
    r_opt = optimal_radius(lo, len(stars), float(config.g_r_at(lo)), s_tilde, s_r)

    settled = set(stars)
    pool = [s for s in catalog.ids.tolist() if s not in settled]
    pool.sort(key=lambda s: (abs(catalog.r[catalog.index(s)] - r_opt), s))
    pool = pool[:max_candidates]
    origins = _fertile(sol, sol.stars(), rules)
    settle = sol.settle_epochs()
    leg = None
    for origin_tau in _reachability(curve, catalog, origins, settle, pool, thresholds, rules):
        cand, opts = origin_tau
        for o, tau in opts:
            t_dep = settle[o] + rules.wait_time
            try:
                leg = solve_two_impulse(curve, catalog.star(o), catalog.star(cand), t_dep,
                                        t_dep + tau, rules=rules)
                break
            except (SolverError, TransferLimitError):
                continue
        if leg is not None:
            break
    if leg is None:
        return noop(f"ring {ring}: no reachable replacement near r = {r_opt:.4f}", r_opt, j)
    sol.legs.append(leg)
    sol.renumber_vessels()
    new_r = catalog.r[catalog.indices(sol.stars())]
    e_after = density_error(new_r, config.radial_points, s_r, config.g_r)
    if not e_after < e_before:
        return AdjustResult(solution.copy(), False, j, leg.dest, r_opt, e_before, e_before,
                            f"ring {ring}: E_r would not decrease ({e_after:.6f}); reverted")
    return AdjustResult(sol, True, j, leg.dest, r_opt, e_before, e_after,
                        f"ring {ring}: replaced {j} by {leg.dest}, E_r {e_before:.6f} -> "
                        f"{e_after:.6f}")


def _reachability(curve, catalog, origins, settle, pool, thresholds, rules):
    """Yield ``(candidate, [(origin, tau), ...])`` in pool order for reachable
    candidates; origins are ordered by earliest arrival."""
    if not origins or not pool:
        return
    taus = np.full((len(origins), len(pool)), np.nan)
    for a, o in enumerate(origins):
        taus[a], _ = min_time_batch(curve, catalog, o, pool, settle[o] + rules.wait_time,
                                    thresholds, rules.t_end, inclusive=True)
    for b, cand in enumerate(pool):
        col = taus[:, b]
        ok = np.nonzero(~np.isnan(col))[0]
        if len(ok) == 0:
            continue
        arr = [(settle[origins[a]] + rules.wait_time + col[a], a) for a in ok]
        arr.sort()
        yield cand, [(origins[a], float(col[a])) for _, a in arr]
