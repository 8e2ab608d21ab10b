"""Command-line pipeline: ``settlers <stage> --config run.json [--zone Z]``.

Solution stages read ``<out>/<zone>.sol`` (or ``--in``), write the result back
to it plus a per-stage copy, and emit plot-ready CSV next to it.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .dynamics import CatalogParseError, generate_catalog, save_catalog
from .linrdv import mobility_map
from .refine import (adjust_sequence, explosion_bounds, explosion_ilp, prune,
                     realize_explosion)
from .score import merit, target_distribution
from .transfer import push_terminal_settles, reoptimize_times
from .tree import SolutionFormatError

log = logging.getLogger("settlers")


def _config(args) -> pl.RunConfig:
    if args.config is None:
        raise pl.ConfigError("this stage needs --config")
    cfg = pl.RunConfig.load(args.config)
    if args.out is not None:
        cfg.out_dir = Path(args.out)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _need_zone(args) -> str:
    if not args.zone:
        raise pl.ConfigError("this stage needs --zone")
    return args.zone


def _paths(cfg, args, stage):
    zone = _need_zone(args)
    main = Path(cfg.out_dir) / f"{zone}.sol"
    src = Path(args.input) if args.input else main
    return zone, src, main, Path(cfg.out_dir) / f"{zone}.{stage}.sol"


def _emit(ctx, sol, main, copy_path) -> int:
    """Validate, then write; invalid solutions are reported and not written."""
    bad = ctx.check(sol)
    if bad:
        for v in bad:
            print(v)
        print(f"{len(bad)} violation(s); solution not written", file=sys.stderr)
        return 1
    ctx.write(sol, copy_path)
    ctx.write(sol, main)
    pl.stars_csv(ctx, sol, copy_path.with_suffix(".stars.csv"))
    pl.legs_csv(sol, copy_path.with_suffix(".legs.csv"))
    print(f"wrote {main} ({len(sol.stars())} stars, {len(sol.legs)} legs, "
          f"dv {sol.dv_used():.3f} km/s)")
    return 0


def cmd_gen_catalog(args) -> int:
    cfg = _config(args)
    g = cfg.catalog_gen
    cat = generate_catalog(int(g.get("n", 5000)), int(g.get("seed", cfg.seed)),
                           g.get("mode", "planar"), float(g.get("max_inclination", 0.1)))
    cfg.catalog.parent.mkdir(parents=True, exist_ok=True)
    save_catalog(cat, cfg.catalog)
    print(f"wrote {cfg.catalog} ({len(cat)} stars, sha256 {cat.digest()[:12]})")
    return 0


def cmd_neighborhoods(args) -> int:
    cfg = _config(args)
    zone = _need_zone(args)
    ctx = pl.Context.from_config(cfg)
    cache = pl.neighborhoods_stage(ctx, zone, workers=args.workers)
    d = pl.cache_dir(cfg, zone)
    cache.save(d)
    with open(d.with_suffix(".csv"), "w") as fh:
        fh.write("origin,epoch,size\n")
        for o, e in cache.keys():
            fh.write(f"{o},{e},{len(cache.get(o, e))}\n")
    print(f"wrote {d} ({len(cache)} neighborhoods)")
    return 0


def cmd_search(args) -> int:
    cfg = _config(args)
    zone, _, main, copy_path = _paths(cfg, args, "search")
    ctx = pl.Context.from_config(cfg)
    cache = pl.load_cache(ctx, zone)
    best, problem = pl.search_stage(ctx, zone, cache, runs=args.runs)
    sol, failed = pl.state_to_solution(ctx, best, cfg.root(zone))
    for o, d, err in failed:
        print(f"dropped edge {o}->{d}: {err}", file=sys.stderr)
    mismatch = pl.cover_mismatch(ctx, sol, problem.zone)
    print(f"search: phi {best.phi:.4f}, {len(best)} stars, cover mismatch {mismatch}")
    pl.occupancy_csv(problem.zone.G - best.H, copy_path.with_suffix(".missing.csv"))
    return _emit(ctx, sol, main, copy_path)


def cmd_explode(args) -> int:
    cfg = _config(args)
    zone, src, main, copy_path = _paths(cfg, args, "explode")
    ctx = pl.Context.from_config(cfg)
    sol = ctx.read(src)
    ex = cfg.explosion
    rules = cfg.vessel_rules()
    x_max = explosion_bounds(sol, ctx.cells, rules.t_end, rules.wait_time,
                             float(ex.get("dt_avg", 6.0)))
    rows, cols = pl.explosion_targets(cfg)
    plan = explosion_ilp(ctx.cells.occupancy(sol.stars()), rows, cols, x_max)
    res = realize_explosion(ctx.curve, sol, plan, ctx.catalog, ctx.cells, rules,
                            cfg.threshold_table() if ex.get("use_thresholds") else None)
    pl.occupancy_csv(plan.x, copy_path.with_suffix(".plan.csv"))
    print(f"explode: plan adds {int(plan.x.sum())} (objective {plan.objective}), "
          f"realized {sum(res.added.values())}, shortfall {sum(res.shortfall.values())}")
    return _emit(ctx, res.solution, main, copy_path)


def cmd_prune(args) -> int:
    cfg = _config(args)
    zone, src, main, copy_path = _paths(cfg, args, "prune")
    ctx = pl.Context.from_config(cfg)
    res = prune(ctx.curve, ctx.read(src), ctx.catalog, cfg.density_config())
    with open(copy_path.with_suffix(".j2.csv"), "w") as fh:
        fh.write("step,removed,J2\n")
        for k, j in enumerate(res.j2_history):
            fh.write(f"{k},{res.removed[k - 1] if k else ''},{j:.6f}\n")
    print(f"prune: removed {len(res.removed)}, J2 {res.j2_history[0]:.4f} -> "
          f"{res.j2_history[-1]:.4f}")
    return _emit(ctx, res.solution, main, copy_path)


def cmd_reopt(args) -> int:
    cfg = _config(args)
    zone, src, main, copy_path = _paths(cfg, args, "reopt")
    ctx = pl.Context.from_config(cfg)
    sol = ctx.read(src)
    opts = dict(cfg.reopt)
    push = opts.pop("push_terminal", True)
    rules = cfg.vessel_rules()
    res = reoptimize_times(ctx.curve, sol, ctx.catalog, rules, **opts)
    out = res.solution
    if push:
        out = push_terminal_settles(ctx.curve, out, ctx.catalog, rules)
    with open(copy_path.with_suffix(".dv.csv"), "w") as fh:
        fh.write("iteration,dv_total_kms\n")
        for k, v in enumerate(res.history + [out.dv_used()]):
            fh.write(f"{k},{v:.6f}\n")
    print(f"reopt-times: dv {res.history[0]:.3f} -> {out.dv_used():.3f} km/s")
    return _emit(ctx, out, main, copy_path)


def cmd_adjust(args) -> int:
    cfg = _config(args)
    zone, src, main, copy_path = _paths(cfg, args, "adjust")
    ctx = pl.Context.from_config(cfg)
    sol = ctx.read(src)
    rings = [args.ring] if args.ring is not None else list(cfg.adjust.get("rings", range(30)))
    for k in rings:
        res = adjust_sequence(ctx.curve, sol, ctx.catalog, int(k), cfg.vessel_rules(),
                              config=cfg.density_config())
        print(res.report)
        sol = res.solution
    return _emit(ctx, sol, main, copy_path)


def _read_for_report(args):
    cfg = _config(args)
    ctx = pl.Context.from_config(cfg)
    if args.input:
        src = Path(args.input)
    else:
        src = Path(cfg.out_dir) / f"{_need_zone(args)}.sol"
    return cfg, ctx, ctx.read(src), src


def cmd_score(args) -> int:
    cfg, ctx, sol, src = _read_for_report(args)
    bad = ctx.check(sol)
    if bad:
        for v in bad:
            print(v)
        return 1
    rep = merit(ctx.curve, sol, ctx.catalog, cfg.vessel_rules(), cfg.density_config())
    print(rep.to_json())
    src.with_suffix(".merit.json").write_text(rep.to_json() + "\n")
    pl.stars_csv(ctx, sol, src.with_suffix(".stars.csv"))
    return 0


def cmd_validate(args) -> int:
    _, ctx, sol, _ = _read_for_report(args)
    bad = ctx.check(sol)
    for v in bad:
        print(v)
    print("valid" if not bad else f"{len(bad)} violation(s)")
    return 1 if bad else 0


def cmd_mobility(args) -> int:
    cfg = _config(args)
    m = cfg.mobility
    rules = cfg.vessel_rules()
    mm = mobility_map(cfg.load_curve(), float(m.get("r0", 8.0)),
                      float(m.get("t0", 0.0)), m.get("taus", [1, 2, 4, 8, 16, 32]),
                      float(m.get("dv_i_max", rules.settler.dv_impulse_max)),
                      float(m.get("dv_tot_max", rules.settler.dv_total_max)),
                      m.get("dr_grid"), m.get("dtheta_grid"), rules.t_end)
    out = Path(cfg.out_dir) / "mobility.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    mm.to_csv(out)
    print(f"wrote {out}")
    return 0


def cmd_target_dist(args) -> int:
    n = args.n
    out_dir = Path(args.out) if args.out else None
    if args.config is not None:
        cfg = _config(args)
        n = n or int(cfg.explosion.get("n_multiple", 1))
        out_dir = out_dir or Path(cfg.out_dir)
    td = target_distribution(n or 1)
    out = (out_dir or Path(".")) / "target_distribution.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    pl.occupancy_csv(td.matrix, out)
    print(f"wrote {out} (total {int(td.matrix.sum())})")
    return 0


COMMANDS = {
    "gen-catalog": cmd_gen_catalog,
    "neighborhoods": cmd_neighborhoods,
    "search": cmd_search,
    "reopt-times": cmd_reopt,
    "explode": cmd_explode,
    "prune": cmd_prune,
    "adjust": cmd_adjust,
    "score": cmd_score,
    "validate": cmd_validate,
    "mobility": cmd_mobility,
    "target-dist": cmd_target_dist,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="settlers", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="run configuration JSON")
        s.add_argument("--zone", help="zone name from the zones file")
        s.add_argument("--seed", type=int, help="override the configured seed")
        s.add_argument("--runs", type=int, default=1, help="independent seeded search runs")
        s.add_argument("--out", help="output directory (overrides the config)")
        s.add_argument("--in", dest="input", help="input solution file")
        if name == "neighborhoods":
            s.add_argument("--workers", type=int, default=1)
        if name == "adjust":
            s.add_argument("--ring", type=int, help="0-based ring index")
        if name == "target-dist":
            s.add_argument("--n", type=int, help="multiple of 512 stars")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (pl.ConfigError, pl.HashMismatchError, SolutionFormatError, CatalogParseError,
            FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
