"""R-tree with a learned leaf predictor, an overlap router and R-tree fallback."""

from .geometry import Point, Rect
from .hybrid import GridPredictor, HybridIndex, OraclePredictor
from .mutation import MutableIndex, MutationPolicy
from .rtree import RTree, build_tree

__all__ = ["Point", "Rect", "RTree", "build_tree", "HybridIndex", "GridPredictor", "OraclePredictor",
           "MutableIndex", "MutationPolicy"]
