# %% [markdown]
# # Settling one zone end to end
#
# Builds a synthetic catalog and a single-zone run in a scratch directory, then
# drives it through the same stages the command line exposes:
# neighbourhoods, beam search, explosion, pruning, time re-optimisation, scoring.
# Takes about half a minute.

# %%
import json
import tempfile
from pathlib import Path

import numpy as np

from settlers.cli import main
from settlers.dynamics import RotationCurve, generate_catalog, save_catalog
from settlers.grid import CellMap, Zone, save_zones

work = Path(tempfile.mkdtemp(prefix="settlers-demo-"))
curve = RotationCurve.flat()
cat = generate_catalog(5000, seed=7)
save_catalog(cat, work / "catalog.csv")
cells = CellMap.from_catalog(curve, cat)
print("scratch directory:", work)

# %% [markdown]
# The zone spans rings 12-15 and slices 1-4. Its target asks for 40 stars spread
# in proportion to what the catalog holds in each cell.

# %%
kr, kt = (12, 15), (1, 4)
occ = cells.occupancy(cat.ids.tolist())[kr[0] - 1:kr[1], kt[0] - 1:kt[1]]
share = occ * 40 / occ.sum()
G = np.floor(share).astype(int)
for k in np.argsort(-(share - G), axis=None, kind="stable")[:40 - G.sum()]:
    G[np.unravel_index(k, G.shape)] += 1
zone = Zone("Z1", kr, kt, G)
save_zones([zone], work / "zones.json")
print(G)

# %% [markdown]
# The root is the zone star closest to the zone centre. Thresholds are a little
# tighter than the vessel limits so every neighbourhood edge survives the
# full-model re-solve.

# %%
stars = cells.zone_stars(zone)
r_mid = float(np.mean([cells.radius[s] for s in stars]))
root = min(stars, key=lambda s: (abs(cells.radius[s] - r_mid), s))
run = {"catalog": "catalog.csv", "zones": "zones.json", "seed": 1, "out_dir": "out",
       "roots": {"Z1": {"star": int(root), "epoch": 0}},
       "thresholds": [[4, 160, 330], [None, 160, 330]],
       "search": {"b_w": 2000, "b_f_max": 200, "b_f": 100, "max_expansions": 300},
       "reopt": {"iters": 3}}
(work / "run.json").write_text(json.dumps(run, indent=1))

# %%
for stage in ("neighborhoods", "search", "explode", "prune", "reopt-times", "score", "validate"):
    code = main([stage, "--config", str(work / "run.json"), "--zone", "Z1"])
    assert code == 0, stage

# %% [markdown]
# Every stage leaves a `.sol` file and plot-ready CSV behind.

# %%
print(sorted(p.name for p in (work / "out").iterdir()))
print(json.loads((work / "out" / "Z1.merit.json").read_text()))
