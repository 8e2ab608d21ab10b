"""Set-covering settlement-tree search with a stochastic beam best-first search.

A state is a settlement tree grown from one root star. Successors add settler
legs from fertile stars (fewer than three departures) to stars of the
precomputed minimum-time neighborhoods, never overfilling a cell of the zone
target ``G``.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import CellMap, Zone, wrap_angle
from .linrdv import NeighborhoodCache
from .units import MAX_OFFSPRING, N_RINGS, N_SLICES, T_END, WAIT_TIME


@dataclass(frozen=True)
class SearchParams:
    b_w: int = 20000
    b_f_max: int = 20000
    b_f: int = 1000
    p_branch: float = 0.7
    mode: str = "multi"  # or "one-vessel"
    seed: int = 0
    max_expansions: int = 50000
    m_hat: float | None = None  # fixed m-hat; None derives it from b_f_max
    resample_m_hat: bool = True

    def __post_init__(self):
        if self.b_f > self.b_f_max:
            raise ValueError("b_f must not exceed b_f_max")
        if not 0.0 <= self.p_branch <= 1.0:
            raise ValueError("p_branch must lie in [0, 1]")
        if self.mode not in ("multi", "one-vessel"):
            raise ValueError(f"unknown transition mode {self.mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> SearchParams:
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True, eq=False)
class SettlementState:
    """Settlement tree; index 0 is the root. ``H`` is zone-local occupancy."""

    stars: tuple
    parents: tuple
    epochs: tuple
    offspring: tuple
    H: np.ndarray = field(repr=False)
    phi: float = 0.0

    def __len__(self):
        return len(self.stars)

    @property
    def key(self):
        return frozenset(zip(self.stars, self.epochs))

    @property
    def t_n(self) -> float:
        return max(self.epochs)

    def legs(self):
        """(parent star, child star, departure epoch, arrival epoch) per edge."""
        out = []
        for k in range(1, len(self.stars)):
            p = self.parents[k]
            out.append((self.stars[p], self.stars[k], self.epochs[p] + WAIT_TIME,
                        self.epochs[k]))
        return out


class SearchProblem:
    """One zone's set-covering problem: root, target, cells and neighborhoods."""

    def __init__(self, zone: Zone, cells: CellMap, cache: NeighborhoodCache,
                 root: int, root_epoch: float, wait: float = WAIT_TIME,
                 t_end: float = T_END):
        self.zone = zone
        self.G = zone.G
        self.cells = cells
        self.cache = cache
        self.root = int(root)
        self.root_epoch = float(root_epoch)
        self.wait = wait
        self.t_end = t_end

    def local_cell(self, star: int):
        return self.zone.cell_index(*self.cells.cell(star))

    def root_state(self) -> SettlementState:
        H = np.zeros_like(self.G)
        c = self.local_cell(self.root)
        if c is not None:
            H[c] += 1
        s = SettlementState((self.root,), (-1,), (self.root_epoch,), ((),), H)
        return _with_phi(s, self.G)

    def neighborhood(self, state: SettlementState, k: int, H=None, settled=None):
        """Filtered entries (target, tau, arrival) for star index ``k``.

        Excludes settled stars, stars in cells already at target, and arrivals
        past the horizon.
        """
        H = state.H if H is None else H
        settled = set(state.stars) if settled is None else settled
        t_dep = state.epochs[k] + self.wait
        nb = self.cache.get(state.stars[k], t_dep)
        if nb is None:
            return []
        out = []
        for tgt, tau in zip(nb.targets.tolist(), nb.tau.tolist()):
            if tgt in settled or t_dep + tau > self.t_end + 1e-9:
                continue
            c = self.local_cell(tgt)
            if c is None or H[c] >= self.G[c]:
                continue
            out.append((tgt, tau, t_dep + tau))
        return out


def cost_phi(state: SettlementState, G) -> float:
    """Entrywise L1 cover mismatch plus the latest settle epoch over 100."""
    return float(np.abs(state.H - np.asarray(G)).sum()) + max(state.epochs) / 100.0


def _with_phi(state: SettlementState, G) -> SettlementState:
    object.__setattr__(state, "phi", cost_phi(state, G))
    return state


def fertile_fitness(state: SettlementState, k: int, problem: SearchProblem) -> int:
    """Missing stars in the 3x3 cell block around star ``k``'s cell.

    Slices wrap modulo 32, rings outside 1..30 and cells outside the zone add
    nothing, and over-full cells count as zero missing.
    """
    k_r, k_t = problem.cells.cell(state.stars[k])
    f = 0
    for p in (-1, 0, 1):
        r = k_r + p
        if r < 1 or r > N_RINGS:
            continue
        for q in (-1, 0, 1):
            t = (k_t + q - 1) % N_SLICES + 1
            c = problem.zone.cell_index(r, t)
            if c is None:
                continue
            f += max(int(problem.G[c] - state.H[c]), 0)
    return f


def _extend(state: SettlementState, k: int, picks, problem: SearchProblem) -> SettlementState:
    stars = list(state.stars)
    parents = list(state.parents)
    epochs = list(state.epochs)
    offspring = [tuple(o) for o in state.offspring]
    H = state.H.copy()
    new_idx = []
    for tgt, _tau, t_arr in picks:
        stars.append(tgt)
        parents.append(k)
        epochs.append(t_arr)
        offspring.append(())
        new_idx.append(len(stars) - 1)
        H[problem.local_cell(tgt)] += 1
    offspring[k] = offspring[k] + tuple(new_idx)
    s = SettlementState(tuple(stars), tuple(parents), tuple(epochs), tuple(offspring), H)
    return _with_phi(s, problem.G)


def _biased_choice(rng, weights) -> int:
    w = np.asarray(weights, float)
    if w.sum() <= 0:
        return int(rng.integers(len(w)))
    return int(rng.choice(len(w), p=w / w.sum()))


def _pick_offspring(rng, entries, t_k, theta_k, problem):
    """Throw-and-multiply rule: earliest arrival or fastest sweep in theta_f."""
    if rng.random() < 0.5:
        best = min(e[2] for e in entries)
        ties = [i for i, e in enumerate(entries) if e[2] == best]
        return ties[int(rng.integers(len(ties)))]
    rates = [abs(float(wrap_angle(problem.cells.theta_f[e[0]] - theta_k))) / (e[2] - t_k)
             for e in entries]
    return int(np.argmax(rates))


def _offspring_variant(state, k, problem, rng):
    """One offspring set for star ``k`` of ``state``, or None if nothing fits."""
    free = MAX_OFFSPRING - len(state.offspring[k])
    if free <= 0:
        return None
    H = state.H.copy()
    settled = set(state.stars)
    work = problem.neighborhood(state, k, H, settled)
    if not work:
        return None
    betas = np.arange(1, free + 1)
    beta = int(rng.choice(betas, p=betas / betas.sum()))
    t_k = state.epochs[k]
    theta_k = problem.cells.theta_f[state.stars[k]]
    picks = []
    while work and len(picks) < beta:
        i = _pick_offspring(rng, work, t_k, theta_k, problem)
        e = work.pop(i)
        picks.append(e)
        H[problem.local_cell(e[0])] += 1
        work = [w for w in work if H[problem.local_cell(w[0])] < problem.G[problem.local_cell(w[0])]]
    return _extend(state, k, picks, problem)


def generate_successors(state: SettlementState, problem: SearchProblem, params: SearchParams,
                        rng: np.random.Generator) -> list[SettlementState]:
    """Successor states of ``state`` by the multi-star multi-vessel heuristic
    (or all single extensions in one-vessel mode), at most ``b_f_max``."""
    fertile = [k for k in range(len(state))
               if len(state.offspring[k]) < MAX_OFFSPRING and problem.neighborhood(state, k)]
    if not fertile:
        return []
    if params.mode == "one-vessel":
        out = []
        for k in fertile:
            for e in problem.neighborhood(state, k):
                out.append(_extend(state, k, [e], problem))
                if len(out) >= params.b_f_max:
                    return out
        return out

    fitness = {k: fertile_fitness(state, k, problem) for k in fertile}
    f_bar = float(np.mean(list(fitness.values())))
    n_f = len(fertile)
    m0 = params.m_hat if params.m_hat is not None else params.b_f_max ** (1.0 / n_f)
    m_hat = m0
    level = [state]
    candidates = list(fertile)
    while candidates and len(level) < params.b_f_max:
        i = _biased_choice(rng, [fitness[k] for k in candidates])
        k = candidates.pop(i)
        if params.resample_m_hat:
            m_hat = rng.uniform(m0, m0 + 4.0)
        m_k = math.ceil(1.2 * m_hat) if fitness[k] > f_bar else math.ceil(m_hat)
        nxt = []
        for base in level:
            carried = False
            for _ in range(m_k):
                v = _offspring_variant(base, k, problem, rng)
                if v is None:
                    if not carried:
                        nxt.append(base)
                        carried = True
                else:
                    nxt.append(v)
                if len(nxt) >= params.b_f_max:
                    break
            if len(nxt) >= params.b_f_max:
                break
        level = nxt
    out, seen = [], {state.key}
    for s in level:
        if s.key not in seen:
            seen.add(s.key)
            out.append(s)
    return out


@dataclass
class SearchResult:
    best: SettlementState
    expansions: int
    frontier_peak: int
    best_history: list  # (expansion, phi)


def bbfs(problem: SearchProblem, params: SearchParams | None = None,
         rng: np.random.Generator | None = None) -> SearchResult:
    """Beam best-first search; returns the minimum-phi state seen."""
    params = params or SearchParams()
    rng = np.random.default_rng(params.seed) if rng is None else rng
    root = problem.root_state()
    best = root
    history = [(0, root.phi)]
    counter = 0
    frontier = [(root.phi, counter, root)]
    seen = {root.key}
    expansions = 0
    peak = 1
    while frontier and expansions < params.max_expansions:
        _, _, s = heapq.heappop(frontier)
        succ = generate_successors(s, problem, params, rng)
        expansions += 1
        succ = [x for x in succ if x.key not in seen]
        if not succ:
            continue
        if len(succ) > params.b_f:
            if rng.random() < params.p_branch:
                succ = sorted(succ, key=lambda x: x.phi)[:params.b_f]
            else:
                phis = np.array([x.phi for x in succ])
                w = phis.max() - phis + 1.0
                pick = rng.choice(len(succ), size=params.b_f, replace=False, p=w / w.sum())
                succ = [succ[i] for i in sorted(pick)]
        for x in succ:
            seen.add(x.key)
            counter += 1
            heapq.heappush(frontier, (x.phi, counter, x))
            if x.phi < best.phi:
                best = x
                history.append((expansions, x.phi))
        if len(frontier) > params.b_w:
            frontier = heapq.nsmallest(params.b_w, frontier)
            heapq.heapify(frontier)
        peak = max(peak, len(frontier))
    return SearchResult(best, expansions, peak, history)


def check_state(state: SettlementState, problem: SearchProblem) -> list[str]:
    """Structural invariants of a state; empty list when consistent."""
    errs = []
    if state.parents[0] != -1:
        errs.append("root has a parent")
    if len(set(state.stars)) != len(state.stars):
        errs.append("duplicate star")
    for k in range(1, len(state)):
        p = state.parents[k]
        if not 0 <= p < k:
            errs.append(f"star {state.stars[k]}: parent index {p} not earlier in the list")
            continue
        if state.epochs[k] < state.epochs[p] + problem.wait + 1.0 - 1e-9:
            errs.append(f"star {state.stars[k]}: settles too soon after its parent")
        if k not in state.offspring[p]:
            errs.append(f"star {state.stars[k]}: missing from parent's offspring")
    for k, o in enumerate(state.offspring):
        if len(o) > MAX_OFFSPRING:
            errs.append(f"star {state.stars[k]}: {len(o)} offspring")
    H = np.zeros_like(problem.G)
    for s in state.stars:
        c = problem.local_cell(s)
        if c is not None:
            H[c] += 1
    if not np.array_equal(H, state.H):
        errs.append("cached occupancy differs from recount")
    # the root may sit in a cell with a zero target; offspring must fit
    H_kids = H.copy()
    rc = problem.local_cell(state.stars[0])
    if rc is not None:
        H_kids[rc] -= 1
    if np.any(H_kids > problem.G):
        errs.append("cell occupancy exceeds target")
    return errs
