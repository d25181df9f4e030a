"""Optimal terminal wealth for an S-shaped investor under a quantile floor with hidden drift."""

from .errors import QvarError
from .model import ModelParams
from .problem import Feasibility, Problem, Solution
from .utility import UtilitySpec

__version__ = "0.1.0"

__all__ = ["ModelParams", "UtilitySpec", "Problem", "Solution", "Feasibility", "QvarError", "__version__"]
