"""Dual Monte Carlo solver.

Terminal samples of the dual discount factor ``zeta`` and the filtered drift
are simulated once with an Euler scheme and reused for every multiplier on
the grid (common random numbers).  For each multiplier the dual start ``y`` is
found by fixed-step gradient descent on ``y -> mean V(y zeta) + x0 y``; the
multiplier is then obtained by inverting the simulated constraint
probability along the grid.
"""

from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DivergenceError, InvalidParameterError
from .model import ModelParams, psi
from .problem import Feasibility, Problem, Solution
from .utility import ConcavifiedUtility, EnvelopeTag

__all__ = [
    "SimConfig",
    "SamplePool",
    "SweepTable",
    "worker_count",
    "simulate_paths",
    "mc_dual_value",
    "mc_dual_gradient",
    "optimize_y",
    "primal_estimates",
    "sweep_lambdas",
    "invert_sweep",
    "lambda_sweep",
]

log = logging.getLogger(__name__)

ZETA_FLOOR = 1e-12
_CHUNK = 8192
_Y_BOUNDS = (1e-6, 1e6)


@dataclass(frozen=True)
class SimConfig:
    M: int = 100_000
    N: int = 100
    seed: int = 2024
    delta: float = 0.1
    descent_steps: int = 200
    J: int = 51
    lambda_max: float = 2.5
    y_init: float = 1.0

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise InvalidParameterError("M and N must be at least 1")
        if not self.delta > 0:
            raise InvalidParameterError("delta must be positive")
        if self.J < 2:
            raise InvalidParameterError("the lambda grid needs at least two points")
        if self.descent_steps < 0 or not self.lambda_max > 0 or not self.y_init > 0:
            raise InvalidParameterError("invalid descent configuration")

    @property
    def lambda_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.lambda_max, self.J)


@dataclass(frozen=True, eq=False)
class SamplePool:
    """Terminal samples ``(zeta_N, mu_hat_N)``; immutable once built."""

    zeta_terminal: np.ndarray
    mu_terminal: np.ndarray
    seed: int
    N: int
    h: float
    excursions: int = 0

    def __post_init__(self):
        self.zeta_terminal.setflags(write=False)
        self.mu_terminal.setflags(write=False)

    @property
    def M(self) -> int:
        return self.zeta_terminal.size

    @cached_property
    def _sorted(self):
        z = np.sort(self.zeta_terminal)
        return z, np.concatenate([[0.0], np.cumsum(z)])

    def power_prefix(self, exponent: float) -> np.ndarray:
        """Prefix sums of ``zeta**exponent`` in ascending ``zeta`` order."""
        cache = self.__dict__.setdefault("_power_cache", {})
        if exponent not in cache:
            z = self._sorted[0]
            cache[exponent] = np.concatenate([[0.0], np.cumsum(np.power(z, exponent))])
        return cache[exponent]


def worker_count() -> int:
    try:
        n = int(os.environ.get("QVAR_THREADS", "1"))
    except ValueError:
        n = 1
    return max(1, min(n, os.cpu_count() or 1))


def _simulate_chunk(seed_seq: np.random.SeedSequence, size: int, N: int, h: float, params: ModelParams):
    rng = np.random.default_rng(seed_seq)
    zeta = np.ones(size)
    mu = np.full(size, params.mu_hat0)
    sqh = math.sqrt(h)
    excursions = 0
    for _ in range(N):
        Z = rng.standard_normal(size)
        zeta = zeta * (1.0 - h * params.r - sqh * (mu - params.r) / params.sigma * Z)
        mu = np.clip(mu + sqh * psi(mu, params) * Z, params.mu_l, params.mu_h)
        low = zeta < ZETA_FLOOR
        if low.any():
            excursions += int(low.sum())
            zeta[low] = ZETA_FLOOR
    return zeta, mu, excursions


def simulate_paths(cfg: SimConfig, params: ModelParams) -> SamplePool:
    """Euler simulation of the dual discount factor and the filtered drift.

    Samples are generated in fixed-size chunks, each with its own stream
    spawned from ``cfg.seed``, so results do not depend on the worker count.
    """
    h = params.T / cfg.N
    sizes = [_CHUNK] * (cfg.M // _CHUNK)
    if cfg.M % _CHUNK:
        sizes.append(cfg.M % _CHUNK)
    seqs = np.random.SeedSequence(cfg.seed).spawn(len(sizes))
    jobs = list(zip(seqs, sizes))
    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(lambda j: _simulate_chunk(j[0], j[1], cfg.N, h, params), jobs))
    else:
        parts = [_simulate_chunk(s, n, cfg.N, h, params) for s, n in jobs]
    zeta = np.concatenate([p[0] for p in parts])
    mu = np.concatenate([p[1] for p in parts])
    excursions = sum(p[2] for p in parts)
    if excursions > 1e-3 * cfg.M:
        warnings.warn(
            f"{excursions} nonpositive discount-factor steps clamped; increase N", RuntimeWarning, stacklevel=2
        )
    return SamplePool(zeta, mu, cfg.seed, cfg.N, h, excursions)


def mc_dual_value(y: float, lam: float, pool: SamplePool, knots: ConcavifiedUtility) -> float:
    """Sample mean of ``V_lam(y * zeta)``."""
    if not y > 0:
        raise InvalidParameterError(f"y must be positive, got {y}")
    return float(np.mean(knots.V_dual(y * pool.zeta_terminal, lam)))


def mc_dual_value_with_se(y: float, lam: float, pool: SamplePool, knots: ConcavifiedUtility) -> tuple[float, float]:
    vals = knots.V_dual(y * pool.zeta_terminal, lam)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size))


def mc_dual_gradient(y: float, lam: float, pool: SamplePool, knots: ConcavifiedUtility) -> float:
    """``d/dy mean V(y zeta) = -mean(zeta * x*(y zeta))``.

    Uses prefix sums over sorted samples: ``x*`` is piecewise in ``y zeta`` and
    ``zeta * I1(y zeta)`` factorises into a power of ``y`` times a power of
    ``zeta`` for the power utility.
    """
    spec = knots.spec
    z, cum = pool._sorted
    a = 1.0 / (1.0 - spec.gamma1)
    c = knots.case(lam)
    if c.tag is EnvelopeTag.TWO_SEGMENT:
        cut_in, cut_floor = knots.c_z_tilde, c.k_lambda
    else:
        cut_in = cut_floor = c.c_z_tilde0
    # x*(y zeta) is interior for y zeta < cut_in, L for cut_in <= y zeta < cut_floor
    i1 = int(np.searchsorted(z, cut_in / y, side="left"))
    i2 = max(i1, int(np.searchsorted(z, cut_floor / y, side="left")))
    pw = pool.power_prefix(1.0 - a)
    total = spec.theta * cum[i1] + (spec.gamma1 / y) ** a * pw[i1] + spec.L * (cum[i2] - cum[i1])
    return -total / z.size


def optimize_y(lam: float, x0: float, pool: SamplePool, knots: ConcavifiedUtility, cfg: SimConfig) -> tuple[float, float]:
    """Fixed-step descent for the dual start; returns ``(y*, first-order residual)``."""
    if not x0 > 0:
        raise InvalidParameterError(f"x0 must be positive, got {x0}")
    y = cfg.y_init
    for _ in range(cfg.descent_steps):
        y = y - cfg.delta * (mc_dual_gradient(y, lam, pool, knots) + x0)
        if not _Y_BOUNDS[0] < y < _Y_BOUNDS[1]:
            raise DivergenceError(f"dual start left {_Y_BOUNDS} at lambda={lam}: y={y}")
    resid = abs(mc_dual_gradient(y, lam, pool, knots) + x0)
    return y, resid


def primal_estimates(lam: float, y_star: float, pool: SamplePool, knots: ConcavifiedUtility) -> dict[str, float]:
    """Sample statistics of the terminal wealth ``x*(y* zeta)``."""
    if not y_star > 0:
        raise InvalidParameterError(f"y_star must be positive, got {y_star}")
    X = knots.x_star(y_star * pool.zeta_terminal, lam)
    L = knots.spec.L
    uc = knots.envelope(X, lam)
    M = X.size
    return {
        "u_c": float(uc.mean()),
        "u_c_se": float(uc.std(ddof=1) / math.sqrt(M)) if M > 1 else math.nan,
        "u": float(knots.spec.eval_U(X).mean()),
        "h": float(np.mean(X >= L)),
        "p_at_L": float(np.mean(X == L)),
        "p_at_0": float(np.mean(X == 0)),
    }


SWEEP_COLUMNS = ("lambda", "y_star", "u_c", "u", "h", "p_at_L", "p_at_0")


@dataclass
class SweepTable:
    """Per-multiplier results over the grid, all from one sample pool."""

    x0: float
    lam: np.ndarray
    y_star: np.ndarray
    u_c: np.ndarray
    u: np.ndarray
    h: np.ndarray
    p_at_L: np.ndarray
    p_at_0: np.ndarray
    residual: np.ndarray
    u_c_se: np.ndarray = field(default_factory=lambda: np.empty(0))

    def rows(self):
        for j in range(self.lam.size):
            yield tuple(float(getattr(self, c if c != "lambda" else "lam")[j]) for c in SWEEP_COLUMNS)

    def full_value(self, epsilon: float) -> np.ndarray:
        """Lagrangian value ``u_c(lam) - lam (1 - epsilon)`` along the grid."""
        return self.u_c - self.lam * (1.0 - epsilon)


def sweep_lambdas(
    x0: float, pool: SamplePool, knots: ConcavifiedUtility, cfg: SimConfig, lambdas=None
) -> SweepTable:
    lambdas = cfg.lambda_grid if lambdas is None else np.asarray(lambdas, dtype=float)
    out = {k: [] for k in ("y_star", "u_c", "u", "h", "p_at_L", "p_at_0", "residual", "u_c_se")}
    for lam in lambdas:
        y, resid = optimize_y(float(lam), x0, pool, knots, cfg)
        est = primal_estimates(float(lam), y, pool, knots)
        out["y_star"].append(y)
        out["residual"].append(resid)
        for key in ("u_c", "u", "h", "p_at_L", "p_at_0", "u_c_se"):
            out[key].append(est[key])
    table = SweepTable(x0, np.array(lambdas), **{k: np.array(v) for k, v in out.items()})
    drops = np.diff(table.h)
    if np.any(drops < -1e-12):
        j = int(np.argmin(drops))
        log.warning("constraint probability decreases between lambda=%g and %g", lambdas[j], lambdas[j + 1])
    bad = table.residual > 1e-3 * x0
    if bad.any():
        log.info("descent residual above 1e-3*x0 at %d grid points (max %.3g)", bad.sum(), table.residual.max())
    return table


def _interp(table: SweepTable, j: int, t: float, name: str) -> float:
    v = getattr(table, name)
    return float(v[j - 1] + t * (v[j] - v[j - 1]))


def invert_sweep(table: SweepTable, epsilon: float, method: str = "mc") -> Solution:
    """Multiplier at which the simulated constraint probability reaches ``1 - epsilon``."""
    target = 1.0 - epsilon
    sol = Solution(method, epsilon, table.x0, Feasibility.FEASIBLE)
    names = ("y_star", "u_c", "u", "p_at_L", "p_at_0", "h")
    if table.h[0] >= target:
        j, t = 1, 0.0
        vals = {n: float(getattr(table, n)[0]) for n in names}
        lam = float(table.lam[0])
    else:
        hits = np.nonzero(table.h >= target)[0]
        if hits.size == 0:
            sol.feasibility = Feasibility.INFEASIBLE
            sol.diagnostics["max_h"] = float(table.h.max())
            sol.diagnostics["hint"] = "constraint not reached on the multiplier grid; enlarge the grid if x0 is feasible"
            return sol
        j = int(hits[0])
        h0, h1 = table.h[j - 1], table.h[j]
        t = (target - h0) / (h1 - h0)
        if target >= 1.0 and h1 >= 1.0 and j >= 2 and table.h[j - 2] < h0:
            # h is capped at 1, so the bracket holds a kink; extend the last
            # unsaturated secant instead of cutting across the kink
            t = min(1.0 + (target - h0) / (h0 - table.h[j - 2]), 2.0)
            j -= 1
            sol.diagnostics["saturated_extrapolation"] = True
        lam = float(table.lam[j - 1] + t * (table.lam[j] - table.lam[j - 1]))
        vals = {n: _interp(table, j, t, n) for n in names}
        for n in ("p_at_L", "p_at_0", "h"):
            vals[n] = min(max(vals[n], 0.0), 1.0)
        if j == table.lam.size - 1 and t >= 1.0:
            sol.diagnostics["at_grid_top"] = True
    sol.lambda_star = lam
    sol.y0 = vals["y_star"]
    sol.u, sol.u_c = vals["u"], vals["u_c"]
    sol.p_at_L, sol.p_at_0, sol.p_above_L = vals["p_at_L"], vals["p_at_0"], vals["h"]
    sol.diagnostics["bracket"] = [float(table.lam[j - 1]), float(table.lam[j])]
    if table.u_c_se.size:
        sol.diagnostics["u_c_se"] = float(table.u_c_se[j - 1] + t * (table.u_c_se[j] - table.u_c_se[j - 1]))
    sol.diagnostics["max_descent_residual"] = float(table.residual.max())
    return sol


def lambda_sweep(x0: float, epsilon: float, pool: SamplePool, cfg: SimConfig, problem: Problem) -> Solution:
    return invert_sweep(sweep_lambdas(x0, pool, problem.knots, cfg), epsilon)
