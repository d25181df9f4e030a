"""Market parameters, the two-state drift filter and the change of measure.

Under the reference measure Q the observation Brownian motion is driftless, so
every expectation of a terminal quantity reduces to a one-dimensional integral
against the N(0, tau) density of the terminal Brownian value ``w``.  The two
functions that appear in all of them are

* ``H_of_w``: the state-price density per unit of starting dual value,
  ``Y(T) = y0 * (1 + phi) * H``;
* ``F_weight``: the likelihood ratio dP/dQ, used to turn Q-expectations into
  P-expectations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidParameterError

__all__ = [
    "ModelParams",
    "DerivedParams",
    "derive_params",
    "psi",
    "log_H_of_w",
    "H_of_w",
    "F_weight",
    "H_mode",
]


@dataclass(frozen=True)
class ModelParams:
    """Market, prior and problem constants.

    Defaults reproduce the numerical section of the reference study: the drift
    takes the values ``mu_l = 0.03`` and ``mu_h = 0.1`` with prior probability
    ``p = 4/7`` on the high state, so the prior mean is 0.07.
    """

    r: float = 0.05
    sigma: float = 0.2
    mu_l: float = 0.03
    mu_h: float = 0.1
    p: float = 4.0 / 7.0
    T: float = 1.0
    x0: float = 1.0
    epsilon: float = 0.1

    def __post_init__(self):
        problems = []
        if not self.sigma > 0:
            problems.append(f"sigma must be positive, got {self.sigma}")
        if not self.mu_l < self.mu_h:
            problems.append(f"need mu_l < mu_h, got {self.mu_l}, {self.mu_h}")
        if not 0 < self.p < 1:
            problems.append(f"p must lie in (0, 1), got {self.p}")
        if not self.T > 0:
            problems.append(f"T must be positive, got {self.T}")
        if not self.x0 > 0:
            problems.append(f"x0 must be positive, got {self.x0}")
        if not 0 <= self.epsilon <= 1:
            problems.append(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not all(math.isfinite(v) for v in (self.r, self.sigma, self.mu_l, self.mu_h, self.T)):
            problems.append("market parameters must be finite")
        if problems:
            raise InvalidParameterError("; ".join(problems))

    @property
    def mu_hat0(self) -> float:
        return self.p * self.mu_h + (1.0 - self.p) * self.mu_l

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class DerivedParams:
    """Constants of the measure change.

    ``theta_l`` is the market price of risk in the low state, ``Theta`` the
    gap between the two states in volatility units, and ``phi`` the starting
    value of the likelihood ratio ``(mu_hat - mu_l) / (mu_h - mu_hat)``.
    """

    theta_l: float
    Theta: float
    mu_hat0: float
    phi: float
    r: float
    T: float

    def at_state(self, mu_hat: float, params: ModelParams) -> "DerivedParams":
        """Same market, filter restarted from ``mu_hat``."""
        if not params.mu_l < mu_hat < params.mu_h:
            raise InvalidParameterError(
                f"filtered drift {mu_hat} outside ({params.mu_l}, {params.mu_h})"
            )
        phi = (mu_hat - params.mu_l) / (params.mu_h - mu_hat)
        return replace(self, mu_hat0=mu_hat, phi=phi)


def derive_params(params: ModelParams) -> DerivedParams:
    mu_hat0 = params.mu_hat0
    if not params.mu_l < mu_hat0 < params.mu_h:
        raise InvalidParameterError(f"prior mean {mu_hat0} not strictly inside the drift range")
    return DerivedParams(
        theta_l=(params.mu_l - params.r) / params.sigma,
        Theta=(params.mu_h - params.mu_l) / params.sigma,
        mu_hat0=mu_hat0,
        phi=(mu_hat0 - params.mu_l) / (params.mu_h - mu_hat0),
        r=params.r,
        T=params.T,
    )


def psi(mu_hat, params: ModelParams):
    """Volatility of the filtered drift, zero outside ``[mu_l, mu_h]``."""
    mu_hat = np.asarray(mu_hat, dtype=float)
    inside = (mu_hat >= params.mu_l) & (mu_hat <= params.mu_h)
    out = np.where(inside, (mu_hat - params.mu_l) * (params.mu_h - mu_hat) / params.sigma, 0.0)
    return out if out.ndim else float(out)


def _log_phi(phi: float) -> float:
    return math.log(phi) if phi > 0 else -math.inf


def log_H_of_w(w, tau: float, d: DerivedParams):
    w = np.asarray(w, dtype=float)
    num = -d.theta_l * w - (d.r + 0.5 * d.theta_l**2) * tau
    den = np.logaddexp(0.0, _log_phi(d.phi) + d.Theta * w - 0.5 * d.Theta**2 * tau)
    return num - den


def H_of_w(w, tau: float, d: DerivedParams):
    """State-price density per unit starting dual value at Brownian value ``w``.

    ``H = exp(-theta_l w - (r + theta_l^2/2) tau) / (1 + phi exp(Theta w - Theta^2 tau/2))``,
    evaluated in log space.
    """
    out = np.exp(log_H_of_w(w, tau, d))
    return out if np.ndim(out) else float(out)


def F_weight(w, tau: float, d: DerivedParams):
    """Likelihood ratio dP/dQ: ``(1 + phi exp(Theta w - Theta^2 tau / 2)) / (1 + phi)``."""
    w = np.asarray(w, dtype=float)
    log_num = np.logaddexp(0.0, _log_phi(d.phi) + d.Theta * w - 0.5 * d.Theta**2 * tau)
    out = np.exp(log_num - math.log1p(d.phi))
    return out if out.ndim else float(out)


def H_mode(tau: float, d: DerivedParams) -> float | None:
    """Location of the interior maximum of ``H`` in ``w``, if there is one.

    ``d/dw log H = -theta_l - Theta q / (1 + q)`` with ``q`` increasing in ``w``,
    so there is at most one stationary point; it exists iff
    ``0 < -theta_l < Theta`` and ``phi > 0``.
    """
    s = -d.theta_l / d.Theta
    if not (0.0 < s < 1.0) or d.phi <= 0:
        return None
    q = s / (1.0 - s)
    return (math.log(q / d.phi) + 0.5 * d.Theta**2 * tau) / d.Theta
