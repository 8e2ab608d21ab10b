"""Settlement-tree solutions: roots, transfer legs, vessel rules and file format."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .units import MAX_OFFSPRING, T_END, WAIT_TIME

VESSEL_TYPES = ("mother", "fast", "settler")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class VesselLimits:
    max_impulses: int
    dv_impulse_max: float  # km/s
    dv_total_max: float  # km/s


@dataclass(frozen=True)
class VesselRules:
    settler: VesselLimits = VesselLimits(5, 175.0, 400.0)
    mother: VesselLimits = VesselLimits(3, 200.0, 500.0)
    fast: VesselLimits = VesselLimits(2, 750.0, 1500.0)
    settlers_per_star: int = MAX_OFFSPRING
    wait_time: float = WAIT_TIME
    t_end: float = T_END

    def limits(self, vessel_type: str) -> VesselLimits:
        if vessel_type not in VESSEL_TYPES:
            raise ValueError(f"unknown vessel type {vessel_type!r}")
        return getattr(self, vessel_type)

    def to_dict(self) -> dict:
        d = {v: list(vars(self.limits(v)).values()) for v in VESSEL_TYPES}
        d.update(settlers_per_star=self.settlers_per_star, wait_time=self.wait_time,
                 t_end=self.t_end)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> VesselRules:
        kw = {}
        for v in VESSEL_TYPES:
            if v in d:
                n, a, b = d[v]
                kw[v] = VesselLimits(int(n), float(a), float(b))
        for k in ("settlers_per_star", "wait_time", "t_end"):
            if k in d:
                kw[k] = d[k]
        return cls(**kw)


@dataclass
class TransferLeg:
    """One vessel trip. Impulses are ``(epoch, dv)`` with dv in km/s."""

    vessel_type: str
    origin: int
    dest: int
    t_dep: float
    t_arr: float
    impulses: list = field(default_factory=list)
    vessel_id: int = 0

    @property
    def dv_used(self) -> float:
        return float(sum(np.linalg.norm(dv) for _, dv in self.impulses))

    def limit_violations(self, limits: VesselLimits) -> list[str]:
        out = []
        if len(self.impulses) > limits.max_impulses:
            out.append(f"{len(self.impulses)} impulses > {limits.max_impulses}")
        for t, dv in self.impulses:
            m = float(np.linalg.norm(dv))
            if m > limits.dv_impulse_max + 1e-9:
                out.append(f"impulse {m:.3f} km/s at t={t:.4f} > {limits.dv_impulse_max}")
        if self.dv_used > limits.dv_total_max + 1e-9:
            out.append(f"total {self.dv_used:.3f} km/s > {limits.dv_total_max}")
        return out


@dataclass(frozen=True)
class Root:
    star: int
    epoch: float
    vessel_type: str = "mother"


class Solution:
    """A forest of settlement trees: root settlements plus settler legs."""

    def __init__(self, roots=(), legs=()):
        self.roots: list[Root] = list(roots)
        self.legs: list[TransferLeg] = list(legs)

    def copy(self) -> Solution:
        return copy.deepcopy(self)

    def __len__(self):
        return len(self.roots) + len(self.legs)

    def stars(self) -> list[int]:
        return [r.star for r in self.roots] + [leg.dest for leg in self.legs]

    def settle_epochs(self) -> dict[int, float]:
        out = {r.star: r.epoch for r in self.roots}
        out.update({leg.dest: leg.t_arr for leg in self.legs})
        return out

    def parent(self) -> dict[int, int | None]:
        out = {r.star: None for r in self.roots}
        out.update({leg.dest: leg.origin for leg in self.legs})
        return out

    def children(self) -> dict[int, list[int]]:
        out = {s: [] for s in self.stars()}
        for leg in self.legs:
            out.setdefault(leg.origin, []).append(leg.dest)
        return out

    def leg_to(self, star: int) -> TransferLeg | None:
        for leg in self.legs:
            if leg.dest == star:
                return leg
        return None

    def terminal_stars(self) -> list[int]:
        """Settled non-root stars with no departing settlers."""
        kids = self.children()
        roots = {r.star for r in self.roots}
        return [s for s in self.stars() if not kids.get(s) and s not in roots]

    def remove_terminal(self, star: int) -> None:
        if self.children().get(star):
            raise ValueError(f"star {star} has offspring and cannot be removed")
        self.legs = [leg for leg in self.legs if leg.dest != star]

    def dv_used(self) -> float:
        return float(sum(leg.dv_used for leg in self.legs))

    def renumber_vessels(self) -> None:
        for k, leg in enumerate(self.legs, start=1):
            leg.vessel_id = k

    def topological_legs(self) -> list[TransferLeg]:
        return sorted(self.legs, key=lambda g: (g.t_arr, g.dest))


class SolutionFormatError(ValueError):
    pass


def write_solution(sol: Solution, path, curve_hash: str = "", catalog_hash: str = "") -> None:
    """Line-oriented CSV: header comments, ``root`` rows, ``leg`` rows each
    followed by its ``imp`` rows."""
    lines = [f"# settlers-solution {FORMAT_VERSION}",
             f"# curve_sha256 {curve_hash}",
             f"# catalog_sha256 {catalog_hash}"]
    for r in sol.roots:
        lines.append(f"root,{r.star},{r.epoch!r},{r.vessel_type}")
    for leg in sol.topological_legs():
        lines.append(f"leg,{leg.vessel_id},{leg.vessel_type},{leg.origin},{leg.dest},"
                     f"{leg.t_dep!r},{leg.t_arr!r}")
        for t, dv in leg.impulses:
            lines.append(f"imp,{float(t)!r},{float(dv[0])!r},{float(dv[1])!r},{float(dv[2])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_solution(path):
    """Returns ``(solution, header)`` where header has the two input hashes."""
    header = {"format": None, "curve_sha256": "", "catalog_sha256": ""}
    sol = Solution()
    current = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "settlers-solution":
                header["format"] = int(parts[1])
            elif len(parts) >= 1 and parts[0] in header:
                header[parts[0]] = parts[1] if len(parts) > 1 else ""
            continue
        f = line.split(",")
        try:
            if f[0] == "root":
                sol.roots.append(Root(int(f[1]), float(f[2]), f[3]))
            elif f[0] == "leg":
                current = TransferLeg(f[2], int(f[3]), int(f[4]), float(f[5]), float(f[6]),
                                      [], int(f[1]))
                sol.legs.append(current)
            elif f[0] == "imp":
                if current is None:
                    raise SolutionFormatError(f"line {lineno}: impulse before any leg")
                current.impulses.append((float(f[1]), np.array([float(x) for x in f[2:5]])))
            else:
                raise SolutionFormatError(f"line {lineno}: unknown record {f[0]!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, SolutionFormatError):
                raise
            raise SolutionFormatError(f"line {lineno}: {exc}") from None
    if header["format"] != FORMAT_VERSION:
        raise SolutionFormatError(f"unsupported solution format {header['format']}")
    return sol, header
