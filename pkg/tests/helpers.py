"""Shared builders for synthetic settlement trees."""

import numpy as np

from settlers.linrdv import ThresholdTable, min_time_batch
from settlers.transfer import SolverError, TransferLimitError, solve_two_impulse
from settlers.tree import Root, Solution, VesselRules

SAFE_TABLE = ThresholdTable.constant(160.0, 330.0)
INFEASIBLE = 1e12  # finite penalty keeps the bounded scalar search well defined

# acceptance lines collected for the terminal summary
ACCEPTANCE: list = []


def grow_tree(curve, catalog, root, n_stars, rng, rules=None, table=SAFE_TABLE,
              root_epoch=0.0, radius_window=1.5, max_children=3, pool=None):
    """Breadth-first tree of minimum-time settler legs from ``root``.

    Fertile stars launch in settle order; each picks a random reachable star
    among the earliest arrivals. Legs are solved in full dynamics and kept only
    within vessel limits.
    """
    rules = rules or VesselRules()
    sol = Solution([Root(int(root), root_epoch)])
    settled = {int(root)}
    settle = {int(root): root_epoch}
    kids = {int(root): 0}
    pool = catalog.ids if pool is None else np.asarray(pool)
    queue = [int(root)]
    while queue and len(settled) < n_stars:
        queue.sort(key=lambda s: (settle[s], s))
        o = queue[0]
        if kids[o] >= max_children:
            queue.pop(0)
            continue
        r0 = catalog.r[catalog.index(o)]
        cand = [int(s) for s in pool if int(s) not in settled
                and abs(catalog.r[catalog.index(s)] - r0) < radius_window]
        t_dep = settle[o] + rules.wait_time
        if not cand or t_dep + 1 > rules.t_end:
            queue.pop(0)
            continue
        tau, _ = min_time_batch(curve, catalog, o, cand, t_dep, table, rules.t_end)
        ok = np.nonzero(~np.isnan(tau))[0]
        if len(ok) == 0:
            queue.pop(0)
            continue
        best = ok[np.argsort(tau[ok], kind="stable")][:5]
        k = int(rng.choice(best))
        try:
            leg = solve_two_impulse(curve, catalog.star(o), catalog.star(cand[k]), t_dep,
                                    t_dep + tau[k], rules=rules)
        except (SolverError, TransferLimitError):
            kids[o] += 1  # count the failed attempt so the loop terminates
            continue
        sol.legs.append(leg)
        d = cand[k]
        settled.add(d)
        settle[d] = leg.t_arr
        kids[d] = 0
        kids[o] += 1
        queue.append(d)
    sol.renumber_vessels()
    return sol


# --- synthetic search instances ----------------------------------------------

def micro_problem(rng, n_stars=7, t_end=30, p_edge=0.45, shape=(2, 2)):
    """Small zone with random cells, targets and a synthetic neighborhood cache.

    Star 1 is the root, settled at epoch 0. Flight times depend on the pair and
    on the parity of the departure epoch, so epochs matter.
    """
    from settlers.grid import CellMap, Zone, slice_centre
    from settlers.linrdv import Neighborhood, NeighborhoodCache
    from settlers.search import SearchProblem

    ids = np.arange(1, n_stars + 1)
    zone_rings, zone_slices = (5, 5 + shape[0] - 1), (32, shape[1] - 1)
    zone = Zone("micro", zone_rings, zone_slices, np.zeros(shape, dtype=int))
    a = rng.integers(0, shape[0], n_stars)
    b = rng.integers(0, shape[1], n_stars)
    rings = np.array(zone.rings)[a]
    slices = np.array(zone.slices)[b]
    theta = slice_centre(slices) + rng.uniform(-0.05, 0.05, n_stars)
    cells = CellMap(ids, rings, slices, theta, rings + 1.5)
    G = np.zeros(shape, dtype=int)
    chosen = [0] + [k for k in range(1, n_stars) if rng.random() < 0.7]
    for k in chosen:
        G[a[k], b[k]] += 1
    zone.G = G
    base = {(o, t): int(rng.integers(1, 6)) for o in ids for t in ids if o != t}
    edge = {(o, t): rng.random() < p_edge for o in ids for t in ids if o != t}
    cache = NeighborhoodCache(t_end=t_end)
    for o in ids:
        for e in range(t_end):
            tg = [t for t in ids if t != o and edge[(o, t)]]
            tau = [base[(o, t)] + e % 2 for t in tg]
            keep = [k for k, x in enumerate(tau) if e + x <= t_end]
            cache.add(Neighborhood(int(o), float(e), np.array(tg, dtype=np.int64)[keep],
                                   np.array(tau, float)[keep], np.zeros(len(keep))))
    return SearchProblem(zone, cells, cache, 1, 0.0, wait=2.0, t_end=t_end)


def exhaustive_phis(problem):
    """Every reachable settlement tree by depth-first enumeration.

    Returns ``{frozenset((star, epoch)): phi}``. Independent of the search
    module: cells, targets and neighborhoods are read directly.
    """
    G = problem.zone.G
    out = {}
    seen = set()

    def cell(s):
        return problem.zone.cell_index(*problem.cells.cell(s))

    def visit(settle, parent, kids, H):
        sig = frozenset((s, settle[s], parent[s]) for s in settle)
        if sig in seen:
            return
        seen.add(sig)
        key = frozenset(settle.items())
        phi = float(np.abs(H - G).sum()) + max(settle.values()) / 100.0
        out[key] = phi
        for s in list(settle):
            if kids[s] >= 3:
                continue
            t_dep = settle[s] + problem.wait
            nb = problem.cache.get(s, t_dep)
            if nb is None:
                continue
            for t, tau in zip(nb.targets.tolist(), nb.tau.tolist()):
                c = cell(t)
                if t in settle or t_dep + tau > problem.t_end or c is None or H[c] >= G[c]:
                    continue
                H2 = H.copy()
                H2[c] += 1
                visit({**settle, t: t_dep + tau}, {**parent, t: s},
                      {**kids, s: kids[s] + 1, t: 0}, H2)

    H0 = np.zeros_like(G)
    c0 = cell(problem.root)
    if c0 is not None:
        H0[c0] += 1
    visit({problem.root: problem.root_epoch}, {problem.root: None}, {problem.root: 0}, H0)
    return out


def unique_optimum(phis):
    """(best phi, True when exactly one tree attains it)."""
    best = min(phis.values())
    hits = sum(1 for v in phis.values() if abs(v - best) < 1e-12)
    return best, hits == 1


def skewed_ring_tree(curve, seed=3, ring=8, n_stars=60):
    """Tree around ring ``ring`` whose in-ring stars avoid the ring's lower 0.7 kpc."""
    from settlers.dynamics import generate_catalog

    cat = generate_catalog(4000, seed)
    lo = 2 + ring
    pool = [int(s) for s, r in zip(cat.ids, cat.r)
            if lo - 1.5 <= r < lo + 3 and not lo <= r < lo + 0.7]
    root = min(pool, key=lambda s: abs(cat.r[cat.index(s)] - (lo + 1.3)))
    sol = grow_tree(curve, cat, root, n_stars, np.random.default_rng(seed), pool=pool,
                    radius_window=1.0)
    return cat, sol


def closest_reachable(curve, catalog, solution, r_opt, rules):
    """Brute-force replacement oracle: scan every unsettled catalog star by
    distance to ``r_opt`` and return the first one some fertile star reaches."""
    from settlers.linrdv import ThresholdTable, min_time_transfer

    eps = 1e-9
    table = ThresholdTable.constant(rules.settler.dv_impulse_max + eps,
                                    rules.settler.dv_total_max + eps)
    settle = solution.settle_epochs()
    kids = solution.children()
    origins = [s for s in settle if len(kids.get(s, [])) < rules.settlers_per_star
               and settle[s] + rules.wait_time + 1 <= rules.t_end]
    free = [int(s) for s in catalog.ids if int(s) not in settle]
    free.sort(key=lambda s: (abs(catalog.r[catalog.index(s)] - r_opt), s))
    for s in free:
        for o in origins:
            t_dep = settle[o] + rules.wait_time
            got = min_time_transfer(curve, catalog.star(o), catalog.star(s), t_dep, table,
                                    rules.t_end)
            if got is None:
                continue
            try:
                solve_two_impulse(curve, catalog.star(o), catalog.star(s), t_dep,
                                  t_dep + got[0], rules=rules)
            except (SolverError, TransferLimitError):
                continue
            return s
    return None


def uniform_catalog(curve, per_angle=40, extra=0):
    """Stars sitting on kernel peaks, counts following the default targets.

    ``extra`` copies of the first star are stacked on top of it.
    """
    from settlers.dynamics import StarCatalog, circular_velocity
    from settlers.score import DensityErrorConfig

    cfg = DensityErrorConfig()
    n = 32 * per_angle
    w = cfg.g_r / cfg.g_r.sum() * n
    counts = np.floor(w).astype(int)
    counts[np.argsort(counts - w)[: n - counts.sum()]] += 1
    radii = np.repeat(cfg.radial_points, counts)
    angles = np.resize(cfg.angular_points, n)
    radii = np.append(radii, [radii[0]] * extra)
    angles = np.append(angles, [angles[0]] * extra)
    phi0 = angles - circular_velocity(curve, radii) / radii * 90.0
    return StarCatalog(np.arange(1, len(radii) + 1), radii, phi0=phi0)


# --- run directories for the pipeline ----------------------------------------

FAST_SEARCH = {"b_w": 2000, "b_f_max": 200, "b_f": 100, "max_expansions": 300}
SAFE_THRESHOLDS = [[4, 160, 330], [None, 160, 330]]


def write_run(directory, n=5000, seed=7, kr=(12, 15), kt=(1, 4), fill=0.5, target=None,
              search=None, run_seed=1, extra=None):
    """Catalog, zone file and run config for a one-zone pipeline run.

    The zone target takes ``fill`` of the catalog stars in each cell, or is
    scaled to ``target`` stars in total; the root is the zone star nearest the
    zone centre.
    """
    import json
    from pathlib import Path

    from settlers.dynamics import RotationCurve, generate_catalog, save_catalog
    from settlers.grid import CellMap, Zone, save_zones, slice_centre

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    curve = RotationCurve.flat()
    cat = generate_catalog(n, seed)
    save_catalog(cat, d / "catalog.csv")
    cells = CellMap.from_catalog(curve, cat)
    probe = Zone("Z1", kr, kt, np.zeros((kr[1] - kr[0] + 1, len(range(kt[0], kt[1] + 1))), int))
    occ = cells.occupancy(cat.ids.tolist())
    sub = occ[np.ix_([k - 1 for k in probe.rings], [k - 1 for k in probe.slices])]
    if target is None:
        G = np.floor(sub * fill).astype(int)
    else:
        G = np.floor(sub * target / sub.sum()).astype(int)
        rest = target - int(G.sum())
        order = np.argsort(-(sub * target / sub.sum() - G), axis=None, kind="stable")
        for flat_k in order[:rest]:
            G[np.unravel_index(flat_k, G.shape)] += 1
    zone = Zone("Z1", kr, kt, G)
    save_zones([zone], d / "zones.json")
    r_mid = 1 + (kr[0] + kr[1] + 1) / 2
    t_mid = float(np.mean(slice_centre(np.array(probe.slices))))
    stars = cells.zone_stars(zone)
    root = min(stars, key=lambda s: (abs(cells.radius[s] - r_mid)
                                     + abs(cells.theta_f[s] - t_mid) * r_mid, s))
    cfg = {"catalog": "catalog.csv", "zones": "zones.json", "seed": run_seed,
           "out_dir": "out", "roots": {"Z1": {"star": int(root), "epoch": 0}},
           "thresholds": SAFE_THRESHOLDS, "search": search or FAST_SEARCH,
           "reopt": {"iters": 3}, **(extra or {})}
    (d / "run.json").write_text(json.dumps(cfg, indent=1))
    return d / "run.json", zone, int(root)


def coordinate_descent_times(curve, solution, catalog, rules, delta_min=-0.2, delta_max=1.0,
                             tof_min=0.5, sweeps=4):
    """Reference time optimiser: per-leg arrival shifts in the box around the
    original epochs, each minimised in turn over the true re-solved ΔV of the
    leg and its child legs (whose departures follow the arrival)."""
    from scipy.optimize import minimize_scalar

    legs = solution.legs
    n = len(legs)
    arr0 = np.array([g.t_arr for g in legs])
    by_dest = {g.dest: j for j, g in enumerate(legs)}
    parent = [by_dest.get(g.origin) for g in legs]
    children = [[k for k in range(n) if parent[k] == j] for j in range(n)]
    shift = np.zeros(n)

    def cost(j, d):
        arr = arr0[j] + d
        if arr > rules.t_end + 1e-12:
            return INFEASIBLE
        dep = arr0[parent[j]] + shift[parent[j]] + rules.wait_time if parent[j] is not None \
            else legs[j].t_dep
        total = 0.0
        for k, t0, tf in [(j, dep, arr)] + [(c, arr + rules.wait_time, arr0[c] + shift[c])
                                            for c in children[j]]:
            if tf - t0 < tof_min:
                return INFEASIBLE
            g = legs[k]
            try:
                total += solve_two_impulse(curve, catalog.star(g.origin), catalog.star(g.dest),
                                           t0, tf, rules=rules).dv_used
            except (SolverError, TransferLimitError):
                return INFEASIBLE
        return total

    for _ in range(sweeps):
        moved = False
        for j in range(n):
            base = cost(j, shift[j])
            res = minimize_scalar(lambda d: cost(j, d), bounds=(delta_min, delta_max),
                                  method="bounded", options={"xatol": 1e-4})
            if res.fun < base - 1e-9:
                shift[j] = res.x
                moved = True
        if not moved:
            break
    total = 0.0
    for j, g in enumerate(legs):
        dep = arr0[parent[j]] + shift[parent[j]] + rules.wait_time if parent[j] is not None \
            else g.t_dep
        total += solve_two_impulse(curve, catalog.star(g.origin), catalog.star(g.dest), dep,
                                   arr0[j] + shift[j], rules=rules).dv_used
    return total, shift
