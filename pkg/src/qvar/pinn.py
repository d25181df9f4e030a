"""Physics-informed network for the dual value surface v(t, y, mu_hat, lambda).

The network is a two-hidden-layer tanh perceptron on inputs affinely mapped to
[-1, 1].  The input derivatives the dual PDE needs (first order in t, y, mu and
second order in yy, mu-mu, y-mu) are propagated alongside the activations with
the chain rule, so a single batched pass yields all of them and torch's
reverse mode differentiates the whole residual with respect to the weights.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dual_mc import SamplePool, SimConfig, SweepTable, invert_sweep
from .errors import InvalidParameterError, QvarError, TrainingError
from .model import ModelParams, psi
from .problem import Feasibility, Problem, Solution
from .utility import ConcavifiedUtility

__all__ = [
    "PinnConfig",
    "PinnModel",
    "BoundarySignal",
    "pde_operator",
    "pde_residual",
    "loss",
    "loss_terms",
    "terminal_targets",
    "sample_points",
    "train",
    "solve_y_star",
    "coupled_solve",
]

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DTYPE = torch.float64


class BoundarySignal(QvarError):
    """The optimiser sits on the edge of the training region."""


@dataclass(frozen=True)
class PinnConfig:
    nodes: int = 50
    K_c: int = 2000
    K_b: int = 200
    delta: float = 0.01
    max_steps: int = 20_000
    loss_tol: float = 5e-5
    y_domain: tuple[float, float] = (0.2, 2.0)
    mu_domain: tuple[float, float] = (0.03, 0.1)
    lambda_domain: tuple[float, float] = (0.0, 2.5)
    seed: int = 7
    resample: bool = False
    log_every: int = 100

    def __post_init__(self):
        if min(self.nodes, self.K_c, self.K_b, self.max_steps, self.log_every) < 1:
            raise InvalidParameterError("node and point counts must be positive")
        if not self.delta > 0 or not self.loss_tol > 0:
            raise InvalidParameterError("delta and loss_tol must be positive")
        for name in ("y_domain", "mu_domain", "lambda_domain"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise InvalidParameterError(f"{name} is empty: {lo, hi}")
        if self.y_domain[0] <= 0:
            raise InvalidParameterError("y_domain must be positive")

    @classmethod
    def full(cls, **kw) -> "PinnConfig":
        """Full budget: 100 nodes, 100000 steps."""
        return cls(nodes=100, max_steps=100_000, **kw)

    def digest(self, model: ModelParams) -> str:
        blob = json.dumps({"pinn": asdict(self), "model": asdict(model)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_ACTIVATIONS = {
    # f, f', f'' expressed through the activation value a = f(z)
    "tanh": (torch.tanh, lambda a, z: 1.0 - a * a, lambda a, z: -2.0 * a * (1.0 - a * a)),
    "identity": (lambda z: z, lambda a, z: torch.ones_like(z), lambda a, z: torch.zeros_like(z)),
}

# second derivatives in the dual PDE as index pairs into the (t, y, mu) channels
_PAIRS = ([1, 2, 1], [1, 2, 2])


@dataclass
class PinnModel:
    """Weights ``(A1, A2, A3, b1, b2, b3)`` plus input scaling and training history."""

    A1: torch.Tensor
    A2: torch.Tensor
    A3: torch.Tensor
    b1: torch.Tensor
    b2: torch.Tensor
    b3: torch.Tensor
    lower: np.ndarray
    upper: np.ndarray
    T: float
    activation: str = "tanh"
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, nodes: int, cfg: PinnConfig, T: float, seed: int | None = None, activation="tanh"):
        gen = torch.Generator().manual_seed(cfg.seed if seed is None else seed)

        def glorot(fan_in, fan_out):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            return (torch.rand(fan_in, fan_out, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound

        lower = np.array([0.0, cfg.y_domain[0], cfg.mu_domain[0], cfg.lambda_domain[0]])
        upper = np.array([T, cfg.y_domain[1], cfg.mu_domain[1], cfg.lambda_domain[1]])
        return cls(
            A1=glorot(4, nodes),
            A2=glorot(nodes, nodes),
            A3=glorot(nodes, 1),
            b1=torch.zeros(nodes, dtype=DTYPE),
            b2=torch.zeros(nodes, dtype=DTYPE),
            b3=torch.zeros(1, dtype=DTYPE),
            lower=lower,
            upper=upper,
            T=T,
            activation=activation,
        )

    @property
    def parameters(self) -> list[torch.Tensor]:
        return [self.A1, self.A2, self.A3, self.b1, self.b2, self.b3]

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters)

    @property
    def scale(self) -> torch.Tensor:
        return torch.as_tensor(2.0 / (self.upper - self.lower), dtype=DTYPE)

    def _normalize(self, X: torch.Tensor) -> torch.Tensor:
        lo = torch.as_tensor(self.lower, dtype=DTYPE)
        return (X - lo) * self.scale - 1.0

    def value(self, X: torch.Tensor) -> torch.Tensor:
        f = _ACTIVATIONS[self.activation][0]
        h = f(self._normalize(X) @ self.A1 + self.b1)
        h = f(h @ self.A2 + self.b2)
        return (h @ self.A3 + self.b3).squeeze(-1)

    def derivatives(self, X: torch.Tensor) -> dict[str, torch.Tensor]:
        """Value and the input derivatives ``t, y, mu, yy, mumu, ymu`` at a batch of points.

        First-order channels (t, y, mu) and second-order channels (yy, mumu,
        ymu) are each stacked along a leading axis of size 3.
        """
        f, df, d2f = _ACTIVATIONS[self.activation]
        i, j = _PAIRS
        # layer 1: pre-activation is affine in the inputs
        z1 = self._normalize(X) @ self.A1 + self.b1
        a1 = f(z1)
        g1, c1 = df(a1, z1), d2f(a1, z1)
        w = self.scale[:3, None] * self.A1[:3]  # (3, N)
        d1 = g1 * w[:, None, :]
        dd1 = c1 * (w[i] * w[j])[:, None, :]
        # layer 2
        z2 = a1 @ self.A2 + self.b2
        a2 = f(z2)
        g2, c2 = df(a2, z2), d2f(a2, z2)
        dz2 = d1 @ self.A2
        d2 = g2 * dz2
        dd2 = c2 * dz2[i] * dz2[j] + g2 * (dd1 @ self.A2)
        first = (d2 @ self.A3).squeeze(-1)
        second = (dd2 @ self.A3).squeeze(-1)
        return {
            "v": (a2 @ self.A3 + self.b3).squeeze(-1),
            "t": first[0],
            "y": first[1],
            "mu": first[2],
            "yy": second[0],
            "mumu": second[1],
            "ymu": second[2],
        }

    def eval_with_input_derivatives(self, point) -> tuple[float, ...]:
        """``(v, v_t, v_y, v_yy, v_mumu, v_ymu)`` at a single ``(t, y, mu, lambda)``."""
        X = torch.as_tensor(np.asarray(point, dtype=float).reshape(1, 4), dtype=DTYPE)
        with torch.no_grad():
            d = self.derivatives(X)
        return tuple(float(d[k][0]) for k in ("v", "t", "y", "yy", "mumu", "ymu"))

    def __call__(self, t, y, mu, lam) -> np.ndarray:
        t, y, mu, lam = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (t, y, mu, lam)))
        X = torch.as_tensor(np.stack([t, y, mu, lam], axis=-1).reshape(-1, 4), dtype=DTYPE)
        with torch.no_grad():
            v = self.value(X).numpy()
        return v.reshape(t.shape)

    def dv_dy(self, t, y, mu, lam) -> np.ndarray:
        t, y, mu, lam = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (t, y, mu, lam)))
        X = torch.as_tensor(np.stack([t, y, mu, lam], axis=-1).reshape(-1, 4), dtype=DTYPE)
        with torch.no_grad():
            d = self.derivatives(X)["y"].numpy()
        return d.reshape(t.shape)

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        names = ("A1", "A2", "A3", "b1", "b2", "b3")
        doc = {
            "version": CHECKPOINT_VERSION,
            "activation": self.activation,
            "T": self.T,
            "normalization": {"lower": self.lower.tolist(), "upper": self.upper.tolist()},
            "shapes": {n: list(getattr(self, n).shape) for n in names},
            "tensors": {n: getattr(self, n).detach().reshape(-1).tolist() for n in names},
            "meta": self.meta,
            "history": [list(h) for h in self.history],
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "PinnModel":
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != CHECKPOINT_VERSION:
            raise InvalidParameterError(f"unsupported checkpoint version {doc.get('version')}")
        tensors = {
            n: torch.tensor(doc["tensors"][n], dtype=DTYPE).reshape(doc["shapes"][n]) for n in doc["shapes"]
        }
        return cls(
            **tensors,
            lower=np.array(doc["normalization"]["lower"]),
            upper=np.array(doc["normalization"]["upper"]),
            T=doc["T"],
            activation=doc["activation"],
            meta=doc.get("meta", {}),
            history=[tuple(h) for h in doc.get("history", [])],
        )


def pde_operator(y, mu, v_t, v_y, v_yy, v_mumu, v_ymu, params: ModelParams, psi_mu=None):
    """Generator of the dual state applied to given derivatives.

    Works on numpy arrays and torch tensors alike.
    """
    r, sigma = params.r, params.sigma
    if psi_mu is None:
        psi_mu = psi(mu, params)
    mpr = (mu - r) / sigma
    return (
        v_t
        - r * y * v_y
        + 0.5 * y * y * mpr * mpr * v_yy
        + 0.5 * psi_mu * psi_mu * v_mumu
        - y * mpr * psi_mu * v_ymu
    )


def _psi_torch(mu: torch.Tensor, params: ModelParams) -> torch.Tensor:
    inside = (mu >= params.mu_l) & (mu <= params.mu_h)
    return torch.where(inside, (mu - params.mu_l) * (params.mu_h - mu) / params.sigma, torch.zeros_like(mu))


def pde_residual(points, model: PinnModel, params: ModelParams) -> torch.Tensor:
    """Dual PDE residual of the network at a batch of ``(t, y, mu, lambda)`` rows."""
    X = torch.as_tensor(np.asarray(points, dtype=float).reshape(-1, 4), dtype=DTYPE) \
        if not isinstance(points, torch.Tensor) else points
    d = model.derivatives(X)
    y, mu = X[:, 1], X[:, 2]
    return pde_operator(y, mu, d["t"], d["y"], d["yy"], d["mumu"], d["ymu"], params, _psi_torch(mu, params))


def terminal_targets(boundary: np.ndarray, knots: ConcavifiedUtility) -> np.ndarray:
    """``V_lambda(y)`` for each boundary row ``(T, y, mu, lambda)``."""
    out = np.empty(boundary.shape[0])
    for lam in np.unique(boundary[:, 3]):
        rows = boundary[:, 3] == lam
        out[rows] = knots.V_dual(boundary[rows, 1], float(lam))
    return out


def sample_points(cfg: PinnConfig, T: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform collocation points in the space-time box and boundary points at ``t = T``."""

    def box(n, t_range):
        return np.column_stack(
            [
                rng.uniform(*t_range, n),
                rng.uniform(*cfg.y_domain, n),
                rng.uniform(*cfg.mu_domain, n),
                rng.uniform(*cfg.lambda_domain, n),
            ]
        )

    colloc = box(cfg.K_c, (0.0, T))
    bound = box(cfg.K_b, (T, T))
    return colloc, bound


def loss_terms(model: PinnModel, colloc, bound, targets, params: ModelParams) -> tuple[torch.Tensor, torch.Tensor]:
    """``(sum of squared residuals, sum of squared terminal errors)``."""
    Xc = torch.as_tensor(colloc, dtype=DTYPE)
    Xb = torch.as_tensor(bound, dtype=DTYPE)
    res = pde_residual(Xc, model, params)
    term = model.value(Xb) - torch.as_tensor(targets, dtype=DTYPE)
    return (res * res).sum(), (term * term).sum()


def loss(model: PinnModel, colloc, bound, params: ModelParams, knots: ConcavifiedUtility) -> float:
    with torch.no_grad():
        a, b = loss_terms(model, colloc, bound, terminal_targets(np.asarray(bound), knots), params)
    return float(a + b)


def train(
    cfg: PinnConfig,
    params: ModelParams,
    knots: ConcavifiedUtility,
    log_path=None,
    progress: bool = False,
) -> PinnModel:
    """Fit the network to the dual PDE and its terminal condition with Adam.

    Stops after ``cfg.max_steps`` or once the total loss falls below
    ``cfg.loss_tol`` and returns the parameters with the lowest loss seen, since
    Adam at a fixed rate oscillates.  A non-finite loss aborts with a snapshot
    of the last finite parameters attached to the exception.
    """
    torch.set_num_threads(1)
    rng = np.random.default_rng(cfg.seed)
    model = PinnModel.initialize(cfg.nodes, cfg, params.T)
    model.meta = {"config": asdict(cfg), "config_hash": cfg.digest(params)}
    colloc, bound = sample_points(cfg, params.T, rng)
    targets = terminal_targets(bound, knots)
    for p in model.parameters:
        p.requires_grad_(True)
    opt = torch.optim.Adam(model.parameters, lr=cfg.delta, betas=(0.9, 0.999), eps=1e-8)
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "residual_term", "boundary_term"])
    last_good = [p.detach().clone() for p in model.parameters]
    best, best_step, best_params = math.inf, 0, last_good
    t0 = time.perf_counter()
    try:
        for step in range(1, cfg.max_steps + 1):
            if cfg.resample and step > 1:
                colloc, bound = sample_points(cfg, params.T, rng)
                targets = terminal_targets(bound, knots)
            opt.zero_grad()
            res_term, bnd_term = loss_terms(model, colloc, bound, targets, params)
            total = res_term + bnd_term
            value = total.item()
            if not math.isfinite(value):
                snapshot = {"step": step, "parameters": last_good}
                raise TrainingError(f"non-finite loss at step {step}", snapshot)
            last_good = [p.detach().clone() for p in model.parameters]
            if value < best:
                best, best_step, best_params = value, step, last_good
            done = value <= cfg.loss_tol
            if step % cfg.log_every == 0 or step == 1 or done:
                row = (step, value, res_term.item(), bnd_term.item())
                model.history.append(row)
                if writer:
                    writer.writerow([row[0]] + [f"{x:.6g}" for x in row[1:]])
                if progress:
                    log.info("step %d loss %.4g (%.1fs)", step, value, time.perf_counter() - t0)
            if done:
                break
            total.backward()
            opt.step()
    finally:
        if fh:
            fh.close()
    with torch.no_grad():
        for p, b in zip(model.parameters, best_params):
            p.copy_(b)
            p.requires_grad_(False)
    model.meta["steps"] = model.history[-1][0] if model.history else 0
    model.meta["final_loss"] = model.history[-1][1] if model.history else math.nan
    model.meta["best_loss"] = best
    model.meta["best_step"] = best_step
    return model


def solve_y_star(lam: float, x0: float, model: PinnModel, mu0: float, t: float = 0.0, n_scan: int = 400) -> float:
    """Root of ``dv/dy(t, y, mu0, lam) + x0`` over the trained ``y`` range.

    Scans for sign changes and refines the first by bisection; raises
    :class:`BoundarySignal` if the first-order condition has no root inside.
    """
    lo, hi = model.lower[1], model.upper[1]
    ys = np.linspace(lo, hi, n_scan + 1)
    g = model.dv_dy(t, ys, mu0, lam) + x0
    idx = np.nonzero(np.sign(g[:-1]) != np.sign(g[1:]))[0]
    if idx.size == 0:
        edge = lo if g[0] > 0 else hi
        raise BoundarySignal(f"no interior root at lambda={lam}; optimum at or beyond y={edge}")
    if idx.size > 1:
        warnings.warn(f"{idx.size} roots of the first-order condition at lambda={lam}; taking the smallest")
    a, b = ys[idx[0]], ys[idx[0] + 1]
    ga = g[idx[0]]
    for _ in range(60):
        m = 0.5 * (a + b)
        gm = float(model.dv_dy(t, m, mu0, lam)) + x0
        if np.sign(gm) == np.sign(ga):
            a, ga = m, gm
        else:
            b = m
    return 0.5 * (a + b)


def _wealth_stats(lam, y, pool: SamplePool, knots: ConcavifiedUtility) -> dict[str, float]:
    X = knots.x_star(y * pool.zeta_terminal, lam)
    L = knots.spec.L
    return {
        "u": float(knots.spec.eval_U(X).mean()),
        "h": float(np.mean(X >= L)),
        "p_at_L": float(np.mean(X == L)),
        "p_at_0": float(np.mean(X == 0)),
    }


def pinn_sweep(x0: float, model: PinnModel, pool: SamplePool, knots: ConcavifiedUtility, mu0: float,
               lambdas) -> SweepTable:
    """``y*(lambda)`` from the network and simulated terminal statistics on a multiplier grid."""
    rows = {k: [] for k in ("y_star", "u_c", "u", "h", "p_at_L", "p_at_0")}
    kept = []
    for lam in lambdas:
        try:
            y = solve_y_star(float(lam), x0, model, mu0)
        except BoundarySignal as exc:
            log.warning("%s", exc)
            continue
        st = _wealth_stats(float(lam), y, pool, knots)
        kept.append(float(lam))
        rows["y_star"].append(y)
        rows["u_c"].append(float(model(0.0, y, mu0, lam)) + x0 * y)
        for k in ("u", "h", "p_at_L", "p_at_0"):
            rows[k].append(st[k])
    lam_arr = np.array(kept)
    return SweepTable(x0, lam_arr, residual=np.zeros(lam_arr.size), **{k: np.array(v) for k, v in rows.items()})


def coupled_solve(x0: float, epsilon: float, model: PinnModel, pool: SamplePool, problem: Problem,
                  sim: SimConfig | None = None) -> Solution:
    """Multiplier and dual start from the trained network, constraint by simulation."""
    sim = sim or SimConfig()
    knots = problem.knots
    mu0 = problem.model.mu_hat0
    lam_lo, lam_hi = model.lower[3], model.upper[3]
    table = pinn_sweep(x0, model, pool, knots, mu0, np.linspace(lam_lo, lam_hi, sim.J))
    if table.lam.size < 2:
        return Solution("pinn", epsilon, x0, Feasibility.INFEASIBLE, diagnostics={"hint": "no interior dual start"})
    sol = invert_sweep(table, epsilon, method="pinn")
    if sol.feasibility is not Feasibility.FEASIBLE:
        sol.diagnostics["boundary"] = "lambda grid top reached; enlarge the training range"
        return sol
    lam = sol.lambda_star
    try:
        y = solve_y_star(lam, x0, model, mu0)
    except BoundarySignal:
        return sol
    st = _wealth_stats(lam, y, pool, knots)
    sol.y0 = y
    sol.u_c = float(model(0.0, y, mu0, lam)) + x0 * y
    sol.u, sol.p_at_L, sol.p_at_0, sol.p_above_L = st["u"], st["p_at_L"], st["p_at_0"], st["h"]
    if lam >= lam_hi - 1e-12:
        sol.diagnostics["boundary"] = "lambda* on the top of the training range"
    return sol
