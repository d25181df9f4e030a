"""S-shaped utility, its concave envelope and the conjugate dual function.

The utility is ``-U2(theta - x)`` below the reference wealth ``theta`` and
``U1(x - theta)`` above it.  Adding a reward ``lam`` for ending at or above the
floor ``L`` and concavifying gives one of two shapes:

* two segments (``k_lambda > c_z_tilde``): a chord from 0 to ``L``, a tangent
  from ``L`` to ``z_tilde``, then ``U1 + lam``;
* one segment: a single tangent from 0 to ``z_tilde0(lam)``, then ``U1 + lam``.

All operations are vectorised over wealth or dual value.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import bisect

from .errors import BracketError, CaseMismatchError, InvalidParameterError

__all__ = [
    "UtilitySpec",
    "ConcavifiedUtility",
    "EnvelopeTag",
    "EnvelopeCase",
    "compute_knots",
    "closed_form_knots",
]

_XTOL = 1e-12


@dataclass(frozen=True)
class UtilitySpec:
    """Power S-shaped utility ``U1(s) = s**gamma1``, ``U2(s) = s**gamma2``."""

    gamma1: float = 0.5
    gamma2: float = 0.3
    theta: float = 1.5
    L: float = 0.9

    def __post_init__(self):
        problems = []
        if not 0 < self.gamma1 < 1:
            problems.append(f"gamma1 must lie in (0, 1), got {self.gamma1}")
        if not 0 < self.gamma2 < 1:
            problems.append(f"gamma2 must lie in (0, 1), got {self.gamma2}")
        if not 0 < self.L < self.theta:
            problems.append(f"need 0 < L < theta, got L={self.L}, theta={self.theta}")
        if problems:
            raise InvalidParameterError("; ".join(problems))

    def U1(self, s):
        return np.power(s, self.gamma1)

    def U1_prime(self, s):
        return self.gamma1 * np.power(s, self.gamma1 - 1.0)

    def I1(self, y):
        """Inverse of ``U1'``: ``(gamma1 / y) ** (1 / (1 - gamma1))``."""
        y = np.asarray(y, dtype=float)
        if np.any(y <= 0):
            raise InvalidParameterError("marginal utility must be positive")
        out = np.power(self.gamma1 / y, 1.0 / (1.0 - self.gamma1))
        return out if out.ndim else float(out)

    def U2(self, s):
        return np.power(s, self.gamma2)

    def eval_U(self, x):
        """The S-shaped utility itself; ``-inf`` for negative wealth."""
        x = np.asarray(x, dtype=float)
        with np.errstate(invalid="ignore"):
            out = np.where(
                x < 0,
                -np.inf,
                np.where(
                    x < self.theta,
                    -self.U2(np.clip(self.theta - x, 0.0, None)),
                    self.U1(np.clip(x - self.theta, 0.0, None)),
                ),
            )
        return out if out.ndim else float(out)


class EnvelopeTag(str, enum.Enum):
    TWO_SEGMENT = "TwoSegment"
    ONE_SEGMENT = "OneSegment"


@dataclass(frozen=True)
class EnvelopeCase:
    tag: EnvelopeTag
    k_lambda: float
    z_tilde0: float | None  # only for the one-segment shape
    c_z_tilde0: float | None


def _root_above_theta(f, theta: float, lo: float | None = None, hi: float | None = None) -> float:
    """Bisection for a sign change of ``f`` on ``(theta, inf)``."""
    lo = theta + 1e-12 if lo is None else lo
    hi = theta + 10.0 * (theta + 1.0) if hi is None else hi
    f_lo = f(lo)
    for _ in range(200):
        if f_lo * f(hi) <= 0:
            return bisect(f, lo, hi, xtol=_XTOL, rtol=4 * np.finfo(float).eps, maxiter=400)
        hi = theta + 2.0 * (hi - theta)
    raise BracketError("no sign change above theta; utility axioms violated?")


@dataclass(frozen=True)
class ConcavifiedUtility:
    spec: UtilitySpec
    z: float
    z_tilde: float
    c_z: float
    c_z_tilde: float
    _cases: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def lambda_c(self) -> float:
        """Multiplier at which the envelope switches from one to two segments."""
        s = self.spec
        return self.c_z_tilde * s.L - s.U2(s.theta) + s.U2(s.theta - s.L)

    def k_lambda(self, lam: float) -> float:
        """Slope of the chord from ``(0, U(0))`` to ``(L, U(L) + lam)``."""
        s = self.spec
        return (s.U2(s.theta) - s.U2(s.theta - s.L) + lam) / s.L

    def z_tilde0(self, lam: float) -> float:
        """Tangency point of the single-segment envelope; requires ``k_lambda <= c_z_tilde``."""
        if self.k_lambda(lam) > self.c_z_tilde:
            raise CaseMismatchError(f"lambda={lam} gives a two-segment envelope")
        if lam == 0:
            return self.z
        s = self.spec
        th = s.theta
        u2 = s.U2(th)

        def f(x):
            return s.U1(x - th) + u2 + lam - x * s.U1_prime(x - th)

        lo, hi = self.z_tilde, self.z
        f_lo, f_hi = f(lo), f(hi)
        if f_lo * f_hi > 0:
            # only at lam == lambda_c up to rounding
            return lo if abs(f_lo) < abs(f_hi) else hi
        return bisect(f, lo, hi, xtol=_XTOL, rtol=4 * np.finfo(float).eps, maxiter=400)

    def case(self, lam: float) -> EnvelopeCase:
        if lam < 0:
            raise InvalidParameterError(f"lambda must be nonnegative, got {lam}")
        lam = float(lam)
        cached = self._cases.get(lam)
        if cached is not None:
            return cached
        k = self.k_lambda(lam)
        if k > self.c_z_tilde:
            out = EnvelopeCase(EnvelopeTag.TWO_SEGMENT, k, None, None)
        else:
            z0 = self.z_tilde0(lam)
            out = EnvelopeCase(EnvelopeTag.ONE_SEGMENT, k, z0, float(self.spec.U1_prime(z0 - self.spec.theta)))
        if len(self._cases) < 4096:
            self._cases[lam] = out
        return out

    def envelope(self, x, lam: float):
        """Concave envelope of ``U(x) + lam * 1{x >= L}``."""
        s = self.spec
        th = s.theta
        c = self.case(lam)
        x = np.asarray(x, dtype=float)
        above = s.U1(np.clip(x - th, 0.0, None)) + lam
        if c.tag is EnvelopeTag.TWO_SEGMENT:
            out = np.where(
                x < s.L,
                c.k_lambda * x - s.U2(th),
                np.where(x < self.z_tilde, self.c_z_tilde * (x - s.L) - s.U2(th - s.L) + lam, above),
            )
        else:
            out = np.where(x < c.z_tilde0, c.c_z_tilde0 * x - s.U2(th), above)
        out = np.where(x < 0, -np.inf, out)
        return out if out.ndim else float(out)

    def x_star(self, y, lam: float):
        """Maximiser of ``envelope(x) - x*y`` over ``x >= 0``; half-open conventions at kinks."""
        s = self.spec
        y = np.asarray(y, dtype=float)
        if np.any(y <= 0):
            raise InvalidParameterError("dual value must be positive")
        c = self.case(lam)
        interior = s.theta + np.power(s.gamma1 / y, 1.0 / (1.0 - s.gamma1))
        if c.tag is EnvelopeTag.TWO_SEGMENT:
            out = np.where(y < self.c_z_tilde, interior, np.where(y < c.k_lambda, s.L, 0.0))
        else:
            out = np.where(y < c.c_z_tilde0, interior, 0.0)
        return out if out.ndim else float(out)

    def V_dual(self, y, lam: float):
        """Convex conjugate ``sup_x {envelope(x) - x y}``."""
        x = self.x_star(y, lam)
        out = self.envelope(x, lam) - x * np.asarray(y, dtype=float)
        return out if np.ndim(out) else float(out)

    def V_dual_derivative(self, y, lam: float):
        """``-x_star(y)``; at a kink this is the left-branch value."""
        out = -np.asarray(self.x_star(y, lam))
        return out if out.ndim else float(out)

    def kinks(self, lam: float) -> list[float]:
        """Dual values where ``x_star`` jumps."""
        c = self.case(lam)
        if c.tag is EnvelopeTag.TWO_SEGMENT:
            return [self.c_z_tilde, c.k_lambda]
        return [c.c_z_tilde0]


def compute_knots(spec: UtilitySpec) -> ConcavifiedUtility:
    th = spec.theta
    u2_th = spec.U2(th)
    u2_tl = spec.U2(th - spec.L)

    def f_z(x):
        return spec.U1(x - th) + u2_th - x * spec.U1_prime(x - th)

    def f_zt(x):
        return spec.U1(x - th) + u2_tl - (x - spec.L) * spec.U1_prime(x - th)

    z = _root_above_theta(f_z, th)
    z_tilde = _root_above_theta(f_zt, th)
    if not th < z_tilde < z:
        raise BracketError(f"knots out of order: theta={th}, z_tilde={z_tilde}, z={z}")
    return ConcavifiedUtility(
        spec=spec,
        z=float(z),
        z_tilde=float(z_tilde),
        c_z=float(spec.U1_prime(z - th)),
        c_z_tilde=float(spec.U1_prime(z_tilde - th)),
    )


def closed_form_knots(spec: UtilitySpec, lam: float = 0.0) -> tuple[float, float]:
    """``(z_tilde0(lam), z_tilde)`` for ``gamma1 = 1/2``; ``z_tilde0(0) = z``."""
    if spec.gamma1 != 0.5:
        raise InvalidParameterError("closed forms only hold for gamma1 = 1/2")
    th = spec.theta
    a = spec.U2(th) + lam
    b = spec.U2(th - spec.L)
    z0 = th + (math.sqrt(a * a + th) - a) ** 2
    zt = th + (math.sqrt(b * b + (th - spec.L)) - b) ** 2
    return z0, zt
