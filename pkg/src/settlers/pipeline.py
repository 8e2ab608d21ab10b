"""Run configuration and pipeline stages shared by the command line and demos."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import RotationCurve, StarCatalog, load_catalog, load_curve
from .grid import CellMap, Zone, load_zones
from .linrdv import NeighborhoodCache, ThresholdTable, build_neighborhoods
from .score import DensityErrorConfig, Violation, target_distribution, validate
from .search import SearchParams, SearchProblem, SettlementState, bbfs
from .transfer import SolverError, TransferLimitError, solve_two_impulse
from .tree import Root, Solution, VesselRules, read_solution, write_solution
from .units import T_END

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class HashMismatchError(ValueError):
    pass


@dataclass
class RunConfig:
    """Pipeline configuration; relative paths resolve against ``base_dir``."""

    base_dir: Path
    catalog: Path
    zones: Path | None = None
    curve: Path | None = None  # None selects the flat default curve
    out_dir: Path = Path("out")
    seed: int = 0
    roots: dict = field(default_factory=dict)  # zone -> {"star", "epoch", "vessel"}
    search: dict = field(default_factory=dict)
    thresholds: list | None = None
    rules: dict = field(default_factory=dict)
    density: dict = field(default_factory=dict)
    catalog_gen: dict = field(default_factory=dict)
    neighborhoods: dict = field(default_factory=dict)
    explosion: dict = field(default_factory=dict)
    reopt: dict = field(default_factory=dict)
    adjust: dict = field(default_factory=dict)
    mobility: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for key in ("catalog", "seed"):
            if key not in d:
                raise ConfigError(f"config needs an explicit {key!r}")
        base = path.resolve().parent
        known = set(cls.__dataclass_fields__) - {"base_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("catalog", "zones", "curve", "out_dir"):
            if kw.get(key) is not None:
                p = Path(kw[key])
                kw[key] = p if p.is_absolute() else base / p
        kw.setdefault("out_dir", base / "out")
        cfg = cls(base_dir=base, **kw)
        for key in ("zones", "curve"):
            p = getattr(cfg, key)
            if p is not None and not p.exists():
                raise ConfigError(f"{key} file {p} does not exist")
        return cfg

    def load_curve(self) -> RotationCurve:
        return RotationCurve.flat() if self.curve is None else load_curve(self.curve)

    def load_catalog(self) -> StarCatalog:
        if not self.catalog.exists():
            raise ConfigError(f"catalog {self.catalog} does not exist (run gen-catalog)")
        return load_catalog(self.catalog)

    def load_zone(self, name: str) -> Zone:
        if self.zones is None:
            raise ConfigError("config has no zones file")
        zones = load_zones(self.zones)
        if name not in zones:
            raise ConfigError(f"zone {name!r} not in {self.zones}; have {sorted(zones)}")
        return zones[name]

    def threshold_table(self) -> ThresholdTable:
        if self.thresholds is None:
            return ThresholdTable.default()
        return ThresholdTable.from_list(self.thresholds)

    def vessel_rules(self) -> VesselRules:
        return VesselRules.from_dict(self.rules)

    def density_config(self) -> DensityErrorConfig:
        return DensityErrorConfig.from_dict(self.density)

    def search_params(self, seed: int | None = None) -> SearchParams:
        d = dict(self.search)
        d["seed"] = self.seed if seed is None else seed
        return SearchParams.from_dict(d)

    def root(self, zone: str) -> Root:
        if zone not in self.roots:
            raise ConfigError(f"no root configured for zone {zone!r}")
        r = self.roots[zone]
        return Root(int(r["star"]), float(r.get("epoch", 0.0)), r.get("vessel", "mother"))


@dataclass
class Context:
    """Loaded inputs of one run."""

    config: RunConfig
    curve: RotationCurve
    catalog: StarCatalog
    cells: CellMap

    @classmethod
    def from_config(cls, config: RunConfig) -> Context:
        curve = config.load_curve()
        catalog = config.load_catalog()
        return cls(config, curve, catalog, CellMap.from_catalog(curve, catalog))

    @property
    def hashes(self):
        return self.curve.digest(), self.catalog.digest()

    def read(self, path) -> Solution:
        sol, header = read_solution(path)
        curve_h, cat_h = self.hashes
        if header["catalog_sha256"] != cat_h:
            raise HashMismatchError(f"{path}: solution was built from a different catalog")
        if header["curve_sha256"] != curve_h:
            raise HashMismatchError(f"{path}: solution was built from a different curve")
        return sol

    def check(self, sol: Solution) -> list[Violation]:
        return validate(self.curve, sol, self.catalog, self.config.vessel_rules())

    def write(self, sol: Solution, path) -> None:
        curve_h, cat_h = self.hashes
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        write_solution(sol, path, curve_h, cat_h)


# --- stages -------------------------------------------------------------------

def cache_dir(config: RunConfig, zone: str) -> Path:
    return Path(config.out_dir) / f"neighborhoods_{zone}"


def neighborhoods_stage(ctx: Context, zone_name: str, workers: int = 1) -> NeighborhoodCache:
    """Zone neighborhoods for every integer departure epoch."""
    cfg = ctx.config
    zone = cfg.load_zone(zone_name)
    root = cfg.root(zone_name)
    targets = ctx.cells.zone_stars(zone)
    origins = sorted(set(targets) | {root.star})
    t_end = cfg.vessel_rules().t_end
    start = int(np.ceil(root.epoch))
    epochs = cfg.neighborhoods.get("epochs") or list(range(start, int(t_end)))
    workers = int(cfg.neighborhoods.get("workers", workers))
    cache = build_neighborhoods(ctx.curve, ctx.catalog, targets, epochs, cfg.threshold_table(),
                                origins, t_end, workers,
                                meta={"zone": zone_name, "catalog_sha256": ctx.catalog.digest()})
    return cache


def load_cache(ctx: Context, zone_name: str) -> NeighborhoodCache:
    d = cache_dir(ctx.config, zone_name)
    if not (d / "manifest.json").exists():
        raise ConfigError(f"no neighborhood cache at {d} (run neighborhoods)")
    cache = NeighborhoodCache.load(d)
    if cache.meta.get("catalog_sha256") != ctx.catalog.digest():
        raise HashMismatchError(f"{d}: cache was built from a different catalog")
    return cache


def _search_one(args):
    zone, cells, cache, root, params = args
    problem = SearchProblem(zone, cells, cache, root.star, root.epoch)
    return bbfs(problem, params).best


def search_stage(ctx: Context, zone_name: str, cache: NeighborhoodCache, runs: int = 1,
                 seed: int | None = None):
    """Best state over ``runs`` independent seeded searches (seeds seed + k)."""
    cfg = ctx.config
    zone = cfg.load_zone(zone_name)
    root = cfg.root(zone_name)
    seed = cfg.seed if seed is None else seed
    jobs = [(zone, ctx.cells, cache, root, cfg.search_params(seed + k)) for k in range(runs)]
    if runs > 1:
        with ProcessPoolExecutor(min(runs, 8)) as pool:
            bests = list(pool.map(_search_one, jobs))
    else:
        bests = [_search_one(jobs[0])]
    best = min(enumerate(bests), key=lambda kb: (kb[1].phi, kb[0]))[1]
    return best, SearchProblem(zone, ctx.cells, cache, root.star, root.epoch)


def state_to_solution(ctx: Context, state: SettlementState, root: Root) -> tuple[Solution, list]:
    """Solve every edge of a search state as a full-dynamics settler leg.

    Returns the solution and a list of ``(origin, dest, error)`` for edges that
    failed; failed edges are left out together with their subtrees.
    """
    rules = ctx.config.vessel_rules()
    sol = Solution([root])
    failed = []
    dead = set()
    for k in range(1, len(state)):
        p = state.parents[k]
        o, d = state.stars[p], state.stars[k]
        if o in dead:
            dead.add(d)
            continue
        t_dep = state.epochs[p] + rules.wait_time
        try:
            leg = solve_two_impulse(ctx.curve, ctx.catalog.star(o), ctx.catalog.star(d),
                                    t_dep, state.epochs[k], rules=rules)
        except (SolverError, TransferLimitError) as exc:
            failed.append((o, d, str(exc)))
            dead.add(d)
            continue
        sol.legs.append(leg)
    sol.renumber_vessels()
    return sol, failed


def explosion_targets(config: RunConfig):
    n = int(config.explosion.get("n_multiple", 1))
    td = target_distribution(n)
    return td.rows, td.cols


def cover_mismatch(ctx: Context, sol: Solution, zone: Zone) -> int:
    H = np.zeros_like(zone.G)
    for s in sol.stars():
        c = zone.cell_index(*ctx.cells.cell(s))
        if c is not None:
            H[c] += 1
    return int(np.abs(H - zone.G).sum())


def stars_csv(ctx: Context, sol: Solution, path, t_end: float = T_END) -> None:
    """Plot-ready per-star table: id, radius, theta_f, cell, settle epoch, parent."""
    settle = sol.settle_epochs()
    parent = sol.parent()
    with open(path, "w") as fh:
        fh.write("star,r_kpc,theta_f_rad,k_r,k_theta,settle_myr,parent\n")
        for s in sol.stars():
            k_r, k_t = ctx.cells.cell(s)
            p = parent.get(s)
            fh.write(f"{s},{ctx.cells.radius[s]:.6f},{ctx.cells.theta_f[s]:.6f},{k_r},{k_t},"
                     f"{settle[s]:.6f},{'' if p is None else p}\n")


def legs_csv(sol: Solution, path) -> None:
    with open(path, "w") as fh:
        fh.write("vessel_id,vessel_type,origin,dest,t_dep,t_arr,dv_kms\n")
        for leg in sol.topological_legs():
            fh.write(f"{leg.vessel_id},{leg.vessel_type},{leg.origin},{leg.dest},"
                     f"{leg.t_dep:.6f},{leg.t_arr:.6f},{leg.dv_used:.6f}\n")


def occupancy_csv(matrix, path) -> None:
    m = np.asarray(matrix)
    with open(path, "w") as fh:
        fh.write("k_r," + ",".join(f"t{j + 1}" for j in range(m.shape[1])) + "\n")
        for i, row in enumerate(m, start=1):
            fh.write(f"{i}," + ",".join(str(int(v)) for v in row) + "\n")
