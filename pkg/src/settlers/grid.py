"""The 30x32 (r, theta_f) cell grid and search zones.

Rings and slices are 1-based, as in the zone tables: ring k_r spans
r in [1 + k_r, 2 + k_r] kpc and slice k_t spans
theta_f in [-pi + (k_t - 1) pi/16, -pi + k_t pi/16].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .units import N_RINGS, N_SLICES

SLICE_WIDTH = np.pi / 16


def ring_of(r):
    r = np.asarray(r, dtype=float)
    return np.clip(np.floor(r).astype(int) - 1, 1, N_RINGS)


def slice_of(theta):
    theta = np.asarray(theta, dtype=float)
    return np.clip(np.floor((theta + np.pi) / SLICE_WIDTH).astype(int) + 1, 1, N_SLICES)


def slice_centre(k_t):
    return -np.pi + (np.asarray(k_t) - 0.5) * SLICE_WIDTH


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def slice_range(lo: int, hi: int) -> list[int]:
    """Inclusive slice range, wrapping past 32 when ``lo > hi``."""
    if lo <= hi:
        return list(range(lo, hi + 1))
    return list(range(lo, N_SLICES + 1)) + list(range(1, hi + 1))


@dataclass
class Zone:
    """Contiguous block of cells with a per-cell target occupancy ``G``.

    ``G[a, b]`` is the target for ring ``rings[a]`` and slice ``slices[b]``.
    """

    name: str
    kr: tuple[int, int]
    ktheta: tuple[int, int]
    G: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.kr = (int(self.kr[0]), int(self.kr[1]))
        self.ktheta = (int(self.ktheta[0]), int(self.ktheta[1]))
        if not (1 <= self.kr[0] <= self.kr[1] <= N_RINGS):
            raise ValueError(f"zone {self.name}: bad ring range {self.kr}")
        if not all(1 <= k <= N_SLICES for k in self.ktheta):
            raise ValueError(f"zone {self.name}: bad slice range {self.ktheta}")
        self.rings = list(range(self.kr[0], self.kr[1] + 1))
        self.slices = slice_range(*self.ktheta)
        G = np.asarray(self.G, dtype=np.int64)
        if G.shape != (len(self.rings), len(self.slices)):
            raise ValueError(f"zone {self.name}: G shape {G.shape} does not match "
                             f"{len(self.rings)}x{len(self.slices)} cells")
        if np.any(G < 0):
            raise ValueError(f"zone {self.name}: G must be non-negative")
        self.G = G
        self._ring_pos = {k: a for a, k in enumerate(self.rings)}
        self._slice_pos = {k: b for b, k in enumerate(self.slices)}

    @property
    def shape(self):
        return self.G.shape

    def cell_index(self, k_r: int, k_t: int):
        """Zone-local (row, col) of a grid cell, or None outside the zone."""
        a = self._ring_pos.get(int(k_r))
        b = self._slice_pos.get(int(k_t))
        if a is None or b is None:
            return None
        return a, b

    def contains(self, k_r, k_t) -> bool:
        return self.cell_index(k_r, k_t) is not None

    def to_dict(self) -> dict:
        return {"name": self.name, "kr": list(self.kr), "ktheta": list(self.ktheta),
                "G": self.G.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> Zone:
        return cls(d["name"], tuple(d["kr"]), tuple(d["ktheta"]), np.asarray(d["G"]))


def load_zones(path) -> dict[str, Zone]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return {z.name: z for z in map(Zone.from_dict, data)}


def save_zones(zones, path) -> None:
    Path(path).write_text(json.dumps([z.to_dict() for z in zones], indent=1) + "\n")


class CellMap:
    """Per-star (ring, slice) lookup computed from theta_f at the horizon."""

    def __init__(self, star_ids, rings, slices, theta_f, radii):
        self.ring = {int(s): int(k) for s, k in zip(star_ids, rings)}
        self.slice = {int(s): int(k) for s, k in zip(star_ids, slices)}
        self.theta_f = {int(s): float(t) for s, t in zip(star_ids, theta_f)}
        self.radius = {int(s): float(r) for s, r in zip(star_ids, radii)}

    @classmethod
    def from_catalog(cls, curve, catalog, t_end: float = 90.0) -> CellMap:
        th = catalog.theta_final(curve, t_end)
        return cls(catalog.ids, ring_of(catalog.r), slice_of(th), th, catalog.r)

    def cell(self, star_id):
        s = int(star_id)
        return self.ring[s], self.slice[s]

    def zone_stars(self, zone: Zone) -> list[int]:
        return [s for s in self.ring if zone.contains(self.ring[s], self.slice[s])]

    def occupancy(self, star_ids) -> np.ndarray:
        """Full-grid 30x32 star counts."""
        H = np.zeros((N_RINGS, N_SLICES), dtype=np.int64)
        for s in star_ids:
            k_r, k_t = self.cell(s)
            H[k_r - 1, k_t - 1] += 1
        return H
