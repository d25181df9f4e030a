"""Bundle of everything a solver needs, plus the shared solution record."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Any

from .model import DerivedParams, ModelParams, derive_params
from .quadrature import QuadratureSpec
from .utility import ConcavifiedUtility, UtilitySpec, compute_knots

__all__ = ["Problem", "Feasibility", "Solution"]


@dataclass(frozen=True)
class Problem:
    model: ModelParams = field(default_factory=ModelParams)
    utility: UtilitySpec = field(default_factory=UtilitySpec)
    quad: QuadratureSpec = field(default_factory=QuadratureSpec)

    @cached_property
    def derived(self) -> DerivedParams:
        return derive_params(self.model)

    @cached_property
    def knots(self) -> ConcavifiedUtility:
        return compute_knots(self.utility)

    def with_model(self, **changes) -> "Problem":
        return Problem(self.model.with_(**changes), self.utility, self.quad)


class Feasibility(str, enum.Enum):
    FEASIBLE = "Feasible"
    BOUNDARY = "Boundary"
    INFEASIBLE = "Infeasible"


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, enum.Enum):
        return v.value
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    return v


@dataclass
class Solution:
    """Result of one constrained solve.

    ``lambda_star`` and ``y0`` are ``inf`` for the floor-only boundary
    solution.  Probabilities are under the physical measure.
    """

    method: str
    epsilon: float
    x0: float
    feasibility: Feasibility
    lambda_star: float = math.nan
    y0: float = math.nan
    form: str | None = None
    u: float = math.nan
    u_c: float = math.nan
    p_at_L: float = math.nan
    p_at_0: float = math.nan
    p_above_L: float = math.nan
    x_hat: float = math.nan
    H_star: float = math.nan
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {k: _clean(v) for k, v in asdict(self).items()}
