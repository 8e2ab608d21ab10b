"""Settlement-tree design for galaxy colonisation: relative dynamics, beam search
and post-search refinement."""

from .dynamics import RotationCurve, StarCatalog, generate_catalog, load_catalog
from .score import merit, validate
from .tree import Solution, VesselRules, read_solution, write_solution

__all__ = ["RotationCurve", "StarCatalog", "generate_catalog", "load_catalog", "merit",
           "validate", "Solution", "VesselRules", "read_solution", "write_solution"]
__version__ = "0.1.0"
