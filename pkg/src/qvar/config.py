"""Experiment configuration: one JSON document, every key optional."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .dual_mc import SimConfig
from .errors import InvalidParameterError
from .model import ModelParams
from .pinn import PinnConfig
from .problem import Problem
from .quadrature import QuadratureSpec
from .utility import UtilitySpec

__all__ = ["ExperimentConfig", "DEFAULT_EPSILON_GRID"]

DEFAULT_EPSILON_GRID = tuple(round(0.05 * k, 2) for k in range(21))

_SECTIONS = {
    "model": ModelParams,
    "utility": UtilitySpec,
    "quadrature": QuadratureSpec,
    "sim": SimConfig,
    "pinn": PinnConfig,
}


def _build(cls, raw: dict):
    if not isinstance(raw, dict):
        raise InvalidParameterError(f"{cls.__name__} section must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise InvalidParameterError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for k, v in raw.items():
        # JSON has no tuples; domains come back as lists
        kw[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelParams = field(default_factory=ModelParams)
    utility: UtilitySpec = field(default_factory=UtilitySpec)
    quadrature: QuadratureSpec = field(default_factory=QuadratureSpec)
    sim: SimConfig = field(default_factory=SimConfig)
    pinn: PinnConfig = field(default_factory=PinnConfig)
    output_dir: str = "out"
    epsilon_grid: tuple[float, ...] = DEFAULT_EPSILON_GRID

    def __post_init__(self):
        if not self.epsilon_grid:
            raise InvalidParameterError("epsilon_grid must be nonempty")
        if any(not 0 <= e <= 1 for e in self.epsilon_grid):
            raise InvalidParameterError("epsilon_grid values must lie in [0, 1]")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        unknown = set(raw) - set(_SECTIONS) - {"output_dir", "epsilon_grid"}
        if unknown:
            raise InvalidParameterError(f"unknown config sections: {sorted(unknown)}")
        kw = {k: _build(c, raw[k]) for k, c in _SECTIONS.items() if k in raw}
        if "output_dir" in raw:
            kw["output_dir"] = str(raw["output_dir"])
        if "epsilon_grid" in raw:
            kw["epsilon_grid"] = tuple(float(e) for e in raw["epsilon_grid"])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidParameterError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @property
    def problem(self) -> Problem:
        return Problem(self.model, self.utility, self.quadrature)
