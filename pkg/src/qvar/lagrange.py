"""Exact solver: quantile threshold, critical wealth and the four-step Lagrange algorithm.

Every probability and expectation is a Q-expectation of a function of the
terminal Brownian value ``w``, computed with breakpoint-aware quadrature.  The
optimal terminal wealth is always of the form

    X = theta + I1(Y)   if H < a
        L               if a <= H < b
        0               otherwise

with ``Y = y0 (1 + phi) H`` and cut levels ``(a, b)`` set by the wealth form.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import InvalidParameterError, RangeError
from .model import DerivedParams, F_weight, H_mode, H_of_w, log_H_of_w
from .problem import Feasibility, Problem, Solution
from .quadrature import QuadratureSpec, find_indicator_breakpoints, q_expect
from .utility import EnvelopeTag

__all__ = [
    "FormTag",
    "WealthForm",
    "H_sup",
    "constraint_mass",
    "solve_H_star",
    "x_hat",
    "classify_feasibility",
    "budget_value",
    "solve_y0",
    "lagrange_solve",
    "dual_value",
    "dual_constraint",
    "wealth_stats",
    "epsilon_thresholds",
]

log = logging.getLogger(__name__)

BOUNDARY_TOL = 1e-9
H_STAR_TOL = 1e-10


class FormTag(str, enum.Enum):
    UNCONSTRAINED = "Unconstrained"
    ONE_SEGMENT_BINDING = "OneSegmentBinding"
    TWO_SEGMENT_BINDING = "TwoSegmentBinding"
    FLOOR_ONLY = "FloorOnly"


@dataclass(frozen=True)
class WealthForm:
    """Optimal terminal wealth shape with its cut levels in H-units."""

    tag: FormTag
    y0: float
    interior_cut: float  # a: interior branch on H < a
    floor_cut: float  # b: wealth L on a <= H < b

    @classmethod
    def build(cls, tag: FormTag, y0: float, H_star: float, problem: Problem) -> "WealthForm":
        k = problem.knots
        scale = y0 * (1.0 + problem.derived.phi)
        if tag is FormTag.UNCONSTRAINED:
            a = k.c_z / scale
            return cls(tag, y0, a, a)
        if tag is FormTag.ONE_SEGMENT_BINDING:
            return cls(tag, y0, H_star, H_star)
        if tag is FormTag.TWO_SEGMENT_BINDING:
            return cls(tag, y0, k.c_z_tilde / scale, H_star)
        return cls(tag, math.inf, 0.0, H_star)

    def cuts(self) -> list[float]:
        return sorted({c for c in (self.interior_cut, self.floor_cut) if 0 < c < math.inf})

    def wealth(self, H, problem: Problem):
        """Terminal wealth at state-price level(s) ``H``."""
        H = np.asarray(H, dtype=float)
        u = problem.utility
        out = np.where(H < self.floor_cut, u.L, 0.0)
        if self.interior_cut > 0 and math.isfinite(self.y0):
            with np.errstate(divide="ignore", over="ignore"):
                Y = self.y0 * (1.0 + problem.derived.phi) * H
                inner = u.theta + np.power(u.gamma1 / Y, 1.0 / (1.0 - u.gamma1))
            out = np.where(H < self.interior_cut, inner, out)
        return out


def _breakpoints(levels, tau: float, d: DerivedParams, quad: QuadratureSpec) -> list[float]:
    pts: list[float] = []
    for lv in levels:
        if 0 < lv < math.inf:
            pts.extend(find_indicator_breakpoints(lv, tau, d, quad))
    return sorted(pts)


def H_sup(tau: float, d: DerivedParams) -> float:
    """Essential supremum of ``H`` over ``w``; ``inf`` if unbounded."""
    mode = H_mode(tau, d)
    if mode is None:
        return math.inf
    return float(H_of_w(mode, tau, d))


def constraint_mass(h_level: float, d: DerivedParams, quad: QuadratureSpec, tau: float | None = None) -> float:
    """``E^Q[F 1{H <= h_level}]``, the P-probability that H stays below a level."""
    tau = d.T if tau is None else tau
    if h_level <= 0:
        return 0.0
    if h_level == math.inf:
        return q_expect(lambda w: F_weight(w, tau, d), tau, quad)
    log_h = math.log(h_level)
    bps = find_indicator_breakpoints(h_level, tau, d, quad)
    return q_expect(lambda w: F_weight(w, tau, d) * (log_H_of_w(w, tau, d) <= log_h), tau, quad, bps)


def solve_H_star(epsilon: float, d: DerivedParams, quad: QuadratureSpec | None = None) -> float:
    """Level ``H*`` with ``P(H(T) <= H*) = 1 - epsilon``.

    For ``epsilon = 0`` this is the essential supremum of ``H(T)``: the
    smallest level that holds with probability one.  It is finite whenever
    ``H`` has an interior maximum, which is the case for the default market.
    """
    quad = quad or QuadratureSpec()
    if not 0 <= epsilon <= 1:
        raise InvalidParameterError(f"epsilon must lie in [0, 1], got {epsilon}")
    if epsilon == 1:
        return 0.0
    tau = d.T
    sup = H_sup(tau, d)
    if epsilon == 0:
        return sup
    target = 1.0 - epsilon
    a = quad.half_width(tau)
    grid = np.linspace(-a, a, 2049)
    lg = log_H_of_w(grid, tau, d)
    lo = float(lg.min()) - 1.0
    hi = float(lg.max()) if math.isinf(sup) else math.log(sup)
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        g = constraint_mass(math.exp(mid), d, quad, tau)
        if abs(g - target) <= 0.01 * H_STAR_TOL:
            return math.exp(mid)
        if g < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    return math.exp(0.5 * (lo + hi))


def x_hat(epsilon: float, d: DerivedParams, quad: QuadratureSpec | None, L: float, H_star: float | None = None) -> float:
    """Critical wealth: cost of paying ``L`` exactly on ``{H(T) < H*}``."""
    quad = quad or QuadratureSpec()
    if H_star is None:
        H_star = solve_H_star(epsilon, d, quad)
    if H_star <= 0:
        return 0.0
    tau = d.T
    bps = _breakpoints([H_star], tau, d, quad)

    def g(w):
        H = H_of_w(w, tau, d)
        return F_weight(w, tau, d) * L * (H < H_star) * (1.0 + d.phi) * H

    return q_expect(g, tau, quad, bps)


def classify_feasibility(x0: float, epsilon: float, problem: Problem, xh: float | None = None) -> Feasibility:
    if not x0 > 0:
        raise InvalidParameterError(f"x0 must be positive, got {x0}")
    if xh is None:
        xh = x_hat(epsilon, problem.derived, problem.quad, problem.utility.L)
    if abs(x0 - xh) <= BOUNDARY_TOL:
        return Feasibility.BOUNDARY
    return Feasibility.FEASIBLE if x0 > xh else Feasibility.INFEASIBLE


def _expect_over_form(form: WealthForm, problem: Problem, fn) -> float:
    """``E^Q[F * fn(w, H, X)]`` with breakpoints at the form's cut levels."""
    d = problem.derived
    tau = d.T
    bps = _breakpoints(form.cuts(), tau, d, problem.quad)

    def g(w):
        H = H_of_w(w, tau, d)
        X = form.wealth(H, problem)
        return F_weight(w, tau, d) * fn(w, H, X)

    return q_expect(g, tau, problem.quad, bps)


def budget_value(y0: float, tag: FormTag, problem: Problem, H_star: float) -> float:
    """Initial cost ``E^Q[F X (1 + phi) H]`` of the terminal wealth of the given form."""
    if not y0 > 0:
        raise InvalidParameterError(f"y0 must be positive, got {y0}")
    form = WealthForm.build(tag, y0, H_star, problem)
    phi = problem.derived.phi
    return _expect_over_form(form, problem, lambda w, H, X: X * (1.0 + phi) * H)


class _BudgetUnreachable(RangeError):
    """The budget stays below ``x0`` for every resolvable ``y0``."""


def _binding_y0(tag: FormTag, x0: float, problem: Problem, H_star: float) -> float:
    """``y0`` for a binding form, or 0 when the root lies below the resolvable range.

    That happens when the region carrying the interior branch has negligible
    mass (``epsilon`` next to 1); the acceptance test then fails as it would for
    any tiny ``y0``.
    """
    try:
        return solve_y0(tag, x0, problem, H_star)
    except _BudgetUnreachable:
        log.info("budget for %s unreachable at x0=%g; step rejected", tag.value, x0)
        return 0.0


def solve_y0(tag: FormTag, x0: float, problem: Problem, H_star: float, rtol: float = 1e-10) -> float:
    """Root of the budget equation by bracketing in ``log y0``."""
    if tag is FormTag.FLOOR_ONLY:
        raise RangeError("the floor-only wealth does not depend on y0")

    def f(log_y):
        return budget_value(math.exp(log_y), tag, problem, H_star) - x0

    lo, hi = -1.0, 1.0
    for _ in range(60):
        if f(lo) > 0:
            break
        lo -= 2.0
    else:
        raise _BudgetUnreachable(f"budget cannot reach x0={x0} for form {tag.value}")
    for _ in range(60):
        if f(hi) < 0:
            break
        hi += 2.0
    else:
        raise RangeError(f"x0={x0} is not above the infimum of the budget for form {tag.value}")
    root = brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    y0 = math.exp(root)
    resid = abs(f(root))
    if resid > rtol * max(1.0, x0):
        log.warning("budget residual %.3g above tolerance for %s", resid, tag.value)
    return y0


def _finish(sol: Solution, form: WealthForm, problem: Problem) -> Solution:
    stats = wealth_stats(sol, problem, form)
    sol.u, sol.u_c, sol.p_at_L, sol.p_at_0, sol.p_above_L = (
        stats["u"],
        stats["u_c"],
        stats["p_at_L"],
        stats["p_at_0"],
        stats["p_above_L"],
    )
    sol.diagnostics["interior_cut"] = form.interior_cut
    sol.diagnostics["floor_cut"] = form.floor_cut
    if math.isfinite(sol.y0):
        sol.diagnostics["budget_residual"] = abs(
            budget_value(sol.y0, form.tag, problem, sol.H_star) - sol.x0
        )
    if math.isfinite(sol.lambda_star):
        sol.diagnostics["slackness_residual"] = abs(
            sol.lambda_star * (sol.p_above_L - (1.0 - sol.epsilon))
        )
    return sol


def lagrange_solve(x0: float, epsilon: float, problem: Problem) -> Solution:
    """Four-step exact algorithm for the constrained problem.

    Step 0 classifies feasibility.  Step 1 tries the two-segment binding form,
    Step 2 the one-segment binding form, Step 3 the unconstrained form; the
    first whose acceptance inequality holds is returned.
    """
    if not x0 > 0:
        raise InvalidParameterError(f"x0 must be positive, got {x0}")
    d, k, quad, util = problem.derived, problem.knots, problem.quad, problem.utility
    H_star = solve_H_star(epsilon, d, quad)
    xh = x_hat(epsilon, d, quad, util.L, H_star)
    feas = classify_feasibility(x0, epsilon, problem, xh)
    sol = Solution("lagrange", epsilon, x0, feas, x_hat=xh, H_star=H_star)
    if feas is Feasibility.INFEASIBLE:
        return sol
    if feas is Feasibility.BOUNDARY:
        form = WealthForm.build(FormTag.FLOOR_ONLY, math.inf, H_star, problem)
        sol.lambda_star, sol.y0, sol.form = math.inf, math.inf, form.tag.value
        return _finish(sol, form, problem)

    one_phi = 1.0 + d.phi
    accept_tol = 1e-12
    if H_star > 0:
        # Step 1
        y3 = _binding_y0(FormTag.TWO_SEGMENT_BINDING, x0, problem, H_star)
        if y3 * (1 + accept_tol) > k.c_z_tilde / (H_star * one_phi):
            k_lam = y3 * one_phi * H_star
            lam = k_lam * util.L + util.U2(util.theta - util.L) - util.U2(util.theta)
            sol.lambda_star, sol.y0, sol.form = float(lam), y3, FormTag.TWO_SEGMENT_BINDING.value
            sol.diagnostics["step"] = 1
            return _finish(sol, WealthForm.build(FormTag.TWO_SEGMENT_BINDING, y3, H_star, problem), problem)
        # Step 2
        y2 = _binding_y0(FormTag.ONE_SEGMENT_BINDING, x0, problem, H_star)
        if y2 * (1 + accept_tol) > k.c_z / (H_star * one_phi):
            z0 = util.theta + util.I1(y2 * one_phi * H_star)
            lam = z0 * util.U1_prime(z0 - util.theta) - util.U1(z0 - util.theta) - util.U2(util.theta)
            sol.lambda_star, sol.y0, sol.form = float(lam), y2, FormTag.ONE_SEGMENT_BINDING.value
            sol.diagnostics["step"] = 2
            return _finish(sol, WealthForm.build(FormTag.ONE_SEGMENT_BINDING, y2, H_star, problem), problem)
    # Step 3
    y1 = solve_y0(FormTag.UNCONSTRAINED, x0, problem, H_star)
    sol.lambda_star, sol.y0, sol.form = 0.0, y1, FormTag.UNCONSTRAINED.value
    sol.diagnostics["step"] = 3
    return _finish(sol, WealthForm.build(FormTag.UNCONSTRAINED, y1, H_star, problem), problem)


def wealth_stats(sol: Solution, problem: Problem, form: WealthForm | None = None) -> dict[str, float]:
    """Expected utility, concavified utility and atom probabilities under P."""
    if form is None:
        form = WealthForm.build(FormTag(sol.form), sol.y0, sol.H_star, problem)
    util, knots = problem.utility, problem.knots
    lam = sol.lambda_star
    L = util.L
    u = _expect_over_form(form, problem, lambda w, H, X: util.eval_U(X))
    p_at_L = _expect_over_form(form, problem, lambda w, H, X: (X == L).astype(float))
    p_at_0 = _expect_over_form(form, problem, lambda w, H, X: (X == 0).astype(float))
    p_above = _expect_over_form(form, problem, lambda w, H, X: (X >= L).astype(float))
    if math.isfinite(lam):
        u_c = _expect_over_form(form, problem, lambda w, H, X: knots.envelope(X, lam))
    else:
        u_c = math.nan
    return {"u": u, "u_c": u_c, "p_at_L": p_at_L, "p_at_0": p_at_0, "p_above_L": p_above}


def _state(t: float, y: float, mu_hat: float, problem: Problem) -> tuple[float, DerivedParams]:
    m = problem.model
    if not y > 0:
        raise InvalidParameterError(f"y must be positive, got {y}")
    if not 0 <= t <= m.T:
        raise InvalidParameterError(f"t must lie in [0, T], got {t}")
    return m.T - t, problem.derived.at_state(mu_hat, m)


def dual_value(t: float, y: float, mu_hat: float, lam: float, problem: Problem) -> float:
    """``E[V_lam(Y(T)) | Y(t) = y, mu_hat(t) = mu_hat]`` by quadrature."""
    tau, d = _state(t, y, mu_hat, problem)
    knots = problem.knots
    if tau == 0:
        return float(knots.V_dual(y, lam))
    scale = y * (1.0 + d.phi)
    bps = _breakpoints([kk / scale for kk in knots.kinks(lam)], tau, d, problem.quad)

    def g(w):
        return F_weight(w, tau, d) * knots.V_dual(scale * H_of_w(w, tau, d), lam)

    return q_expect(g, tau, problem.quad, bps)


def dual_constraint(t: float, y: float, mu_hat: float, lam: float, problem: Problem) -> float:
    """``P(x*(Y(T)) >= L | Y(t) = y, mu_hat(t) = mu_hat)`` by quadrature."""
    tau, d = _state(t, y, mu_hat, problem)
    knots = problem.knots
    c = knots.case(lam)
    cut = c.k_lambda if c.tag is EnvelopeTag.TWO_SEGMENT else c.c_z_tilde0
    if tau == 0:
        return float(y < cut)
    scale = y * (1.0 + d.phi)
    level = cut / scale
    bps = _breakpoints([level], tau, d, problem.quad)
    return q_expect(lambda w: F_weight(w, tau, d) * (H_of_w(w, tau, d) < level), tau, problem.quad, bps)


def epsilon_thresholds(y0: float, problem: Problem) -> tuple[float, float]:
    """``(eps_star, eps_lower)`` separating the three wealth forms at dual start ``y0``."""
    if not y0 > 0:
        raise InvalidParameterError(f"y0 must be positive, got {y0}")
    d, k = problem.derived, problem.knots
    scale = y0 * (1.0 + d.phi)
    eps_star = 1.0 - constraint_mass(k.c_z / scale, d, problem.quad)
    eps_lower = 1.0 - constraint_mass(k.c_z_tilde / scale, d, problem.quad)
    return eps_star, eps_lower
