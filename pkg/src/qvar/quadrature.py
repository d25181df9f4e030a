"""Composite Gauss-Legendre expectations against the N(0, tau) density.

The integrands met in this package are smooth except for jumps where the
state-price density crosses a threshold, so panels are split at those
crossings and each panel gets a fixed-order Gauss-Legendre rule.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable

import numpy as np
from scipy.optimize import brentq

from .errors import InvalidParameterError, NonFiniteIntegrandError
from .model import DerivedParams, H_mode, log_H_of_w

__all__ = ["QuadratureSpec", "nodes_and_weights", "q_expect", "find_indicator_breakpoints"]

_ORDER = 16
_SCAN_INTERVALS = 1024


@dataclass(frozen=True)
class QuadratureSpec:
    node_count: int = 512
    truncation: float = 8.0
    split_tolerance: float = 1e-13

    def __post_init__(self):
        if self.node_count < 64:
            raise InvalidParameterError(f"node_count must be >= 64, got {self.node_count}")
        if self.truncation < 6:
            raise InvalidParameterError(f"truncation must be >= 6, got {self.truncation}")
        if not self.split_tolerance > 0:
            raise InvalidParameterError("split_tolerance must be positive")

    def half_width(self, tau: float) -> float:
        return self.truncation * math.sqrt(tau)


@lru_cache(maxsize=None)
def _legendre(order: int):
    return np.polynomial.legendre.leggauss(order)


def nodes_and_weights(tau: float, spec: QuadratureSpec, breakpoints: Iterable[float] = ()):
    """Nodes and density-weighted weights for ``E[g(W)]``, ``W ~ N(0, tau)``."""
    if not tau > 0:
        raise InvalidParameterError(f"tau must be positive, got {tau}")
    a = spec.half_width(tau)
    n_panels = max(spec.node_count // _ORDER, 1)
    edges = np.linspace(-a, a, n_panels + 1)
    inner = [b for b in breakpoints if -a < b < a]
    if inner:
        edges = np.unique(np.concatenate([edges, inner]))
        # drop slivers that would duplicate an edge numerically
        keep = np.concatenate([[True], np.diff(edges) > 1e-15])
        edges = edges[keep]
    x, w = _legendre(_ORDER)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1:] - edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    dens = np.exp(-0.5 * nodes**2 / tau) / math.sqrt(2.0 * math.pi * tau)
    weights = (half[:, None] * w[None, :]).ravel() * dens
    return nodes, weights


def q_expect(
    g: Callable[[np.ndarray], np.ndarray],
    tau: float,
    spec: QuadratureSpec | None = None,
    breakpoints: Iterable[float] = (),
) -> float:
    """``E[g(W)]`` for ``W ~ N(0, tau)``, truncated at ``spec.truncation`` standard deviations.

    ``g`` is called once with the full vector of nodes.  ``breakpoints`` should
    list the discontinuities of ``g``; they only speed up convergence.
    """
    spec = spec or QuadratureSpec()
    nodes, weights = nodes_and_weights(tau, spec, breakpoints)
    vals = np.broadcast_to(np.asarray(g(nodes), dtype=float), nodes.shape)
    if not np.all(np.isfinite(vals)):
        bad = nodes[~np.isfinite(vals)][0]
        raise NonFiniteIntegrandError(f"integrand is not finite at w={bad:.6g}")
    return float(np.dot(weights, vals))


def find_indicator_breakpoints(
    h_level: float, tau: float, d: DerivedParams, spec: QuadratureSpec | None = None
) -> list[float]:
    """All ``w`` in the truncated domain with ``H_of_w(w) == h_level``."""
    spec = spec or QuadratureSpec()
    if not h_level > 0:
        raise InvalidParameterError(f"h_level must be positive, got {h_level}")
    if d.theta_l == 0 and d.phi == 0:
        warnings.warn("state-price density is constant in w; no isolated crossings", stacklevel=2)
        return []
    a = spec.half_width(tau)
    grid = np.linspace(-a, a, _SCAN_INTERVALS + 1)
    mode = H_mode(tau, d)
    if mode is not None and -a < mode < a:
        # a level just under the peak crosses twice inside one scan cell otherwise
        grid = np.sort(np.append(grid, mode))
    log_level = math.log(h_level)

    def f(w):
        return float(log_H_of_w(w, tau, d)) - log_level

    vals = log_H_of_w(grid, tau, d) - log_level
    roots = []
    for i in np.nonzero(vals[:-1] * vals[1:] <= 0)[0]:
        lo, hi = grid[i], grid[i + 1]
        if vals[i] == 0:
            roots.append(float(lo))
            continue
        if vals[i + 1] == 0:
            continue  # picked up as the left end of the next cell
        roots.append(brentq(f, lo, hi, xtol=spec.split_tolerance, rtol=4 * np.finfo(float).eps))
    if vals[-1] == 0:
        roots.append(float(grid[-1]))
    return sorted(set(roots))
