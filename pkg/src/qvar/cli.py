"""Command line runner: ``qvar {solve,sweep,dist,feasibility,table1}``.

Exit codes: 0 success, 1 invalid input, 2 infeasible, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import reports
from .config import ExperimentConfig
from .dual_mc import SWEEP_COLUMNS, SamplePool, invert_sweep, optimize_y, simulate_paths, sweep_lambdas
from .errors import InvalidParameterError, QvarError
from .lagrange import lagrange_solve, x_hat
from .problem import Feasibility, Solution

log = logging.getLogger("qvar")

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 1, 2, 3

SOLUTION_COLUMNS = (
    "epsilon", "feasibility", "lambda_star", "y0", "form", "u", "u_c", "p_at_L", "p_at_0", "p_above_L", "x_hat",
)
TABLE1_EPSILONS = (0.0, 0.1, 0.35, 1.0)
DIST_LAMBDAS = (0.0, 1.5, 2.5)
FEASIBILITY_X0 = (0.6, 0.66, 0.73, 0.8)


class Runner:
    """Shared state for one invocation: config, lazily built pool and network."""

    def __init__(self, cfg: ExperimentConfig, out: Path, x0: float, plot: bool, checkpoint=None):
        self.cfg = cfg
        self.out = out
        self.x0 = x0
        self.plot = plot
        self.checkpoint = checkpoint
        self.problem = cfg.problem
        self._pool: SamplePool | None = None
        self._model = None
        self.outputs: list[Path] = []
        self._tables: dict = {}

    @property
    def pool(self) -> SamplePool:
        if self._pool is None:
            log.info("simulating %d dual paths", self.cfg.sim.M)
            self._pool = simulate_paths(self.cfg.sim, self.problem.model)
        return self._pool

    @property
    def model(self):
        if self._model is None:
            self._model = self._load_or_train()
        return self._model

    def _load_or_train(self):
        from .pinn import PinnModel, train

        pcfg, params = self.cfg.pinn, self.problem.model
        if self.checkpoint is not None:
            return PinnModel.load(self.checkpoint)
        ck = self.out / "pinn_checkpoint.json"
        if ck.exists():
            m = PinnModel.load(ck)
            if m.meta.get("config_hash") == pcfg.digest(params):
                log.info("reusing %s", ck)
                return m
        log.info("training network: %d nodes, up to %d steps", pcfg.nodes, pcfg.max_steps)
        self.out.mkdir(parents=True, exist_ok=True)
        logp = self.out / "pinn_training.csv"
        m = train(pcfg, params, self.problem.knots, log_path=logp, progress=True)
        m.save(ck)
        self.outputs += [ck, logp]
        if self.plot:
            from .plots import plot_training

            h = np.array(m.history)
            self.outputs.append(plot_training(h[:, 0], h[:, 1], self.out / "pinn_training.png"))
        return m

    def x_hat(self, eps: float) -> float:
        d, q = self.problem.derived, self.problem.quad
        return x_hat(eps, d, q, self.problem.utility.L)

    def solve(self, eps: float, method: str, x0: float | None = None) -> Solution:
        x0 = self.x0 if x0 is None else x0
        if method == "lagrange":
            return lagrange_solve(x0, eps, self.problem)
        if method == "mc":
            sol = invert_sweep(self.mc_table(x0), eps, "mc")
        elif method == "pinn":
            from .pinn import coupled_solve

            sol = coupled_solve(x0, eps, self.model, self.pool, self.problem, self.cfg.sim)
        else:
            raise InvalidParameterError(f"unknown method {method}")
        sol.x_hat = self.x_hat(eps)
        return sol

    def mc_table(self, x0: float):
        if x0 not in self._tables:
            self._tables[x0] = sweep_lambdas(x0, self.pool, self.problem.knots, self.cfg.sim)
        return self._tables[x0]


def _solution_row(sol: Solution):
    return [getattr(sol, c) for c in SOLUTION_COLUMNS]


def cmd_solve(r: Runner, args) -> int:
    eps = r.cfg.model.epsilon if args.epsilon is None else args.epsilon
    sol = r.solve(eps, args.method)
    doc = sol.to_dict()
    r.out.mkdir(parents=True, exist_ok=True)
    path = r.out / f"solve_{args.method}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    r.outputs.append(path)
    r.outputs.append(reports.write_csv(r.out / f"solve_{args.method}.csv", SOLUTION_COLUMNS, [_solution_row(sol)]))
    print(json.dumps(doc, indent=2, sort_keys=True, default=str))
    return EXIT_INFEASIBLE if sol.feasibility is Feasibility.INFEASIBLE else EXIT_OK


def cmd_sweep(r: Runner, args) -> int:
    sols = [r.solve(float(e), args.method) for e in r.cfg.epsilon_grid]
    r.outputs.append(reports.write_csv(r.out / f"sweep_{args.method}.csv", SOLUTION_COLUMNS, map(_solution_row, sols)))
    if args.method == "mc":
        t = r.mc_table(r.x0)
        r.outputs.append(reports.write_csv(r.out / "lambda_sweep_mc.csv", SWEEP_COLUMNS, t.rows()))
    if r.plot:
        from .plots import plot_sweep

        r.outputs.append(
            plot_sweep(
                [s.epsilon for s in sols], [s.lambda_star for s in sols], [s.u_c for s in sols],
                [s.p_above_L for s in sols], r.out / f"sweep_{args.method}.png", args.method,
            )
        )
    print(f"wrote {len(sols)} rows to {r.out / f'sweep_{args.method}.csv'}")
    return EXIT_INFEASIBLE if any(s.feasibility is Feasibility.INFEASIBLE for s in sols) else EXIT_OK


def histogram(X: np.ndarray, L: float, bins: int = 40):
    """Atom rows at 0 and ``L`` then log-spaced bins over the continuous part."""
    n = X.size
    rows = [(0.0, 0.0, float(np.mean(X == 0))), (L, L, float(np.mean(X == L)))]
    cont = X[(X != 0) & (X != L)]
    if cont.size:
        lo, hi = cont.min(), cont.max()
        edges = np.geomspace(lo, hi * (1 + 1e-12), bins + 1) if hi > lo else np.array([lo, lo * (1 + 1e-9)])
        counts, _ = np.histogram(cont, bins=edges)
        rows += [(float(a), float(b), c / n) for a, b, c in zip(edges[:-1], edges[1:], counts)]
    return rows


def cmd_dist(r: Runner, args) -> int:
    lambdas = DIST_LAMBDAS if args.lambdas is None else tuple(args.lambdas)
    knots, L = r.problem.knots, r.problem.utility.L
    for lam in lambdas:
        y, _ = optimize_y(lam, r.x0, r.pool, knots, r.cfg.sim)
        X = knots.x_star(y * r.pool.zeta_terminal, lam)
        rows = histogram(X, L)
        name = f"dist_lambda_{reports.fmt(float(lam))}"
        r.outputs.append(reports.write_csv(r.out / f"{name}.csv", ("bin_left", "bin_right", "frequency"), rows))
        if r.plot:
            from .plots import plot_dist

            cont = rows[2:]
            r.outputs.append(
                plot_dist([c[0] for c in cont], [c[1] for c in cont], [c[2] for c in cont],
                          {0.0: rows[0][2], L: rows[1][2]}, lam, r.out / f"{name}.png")
            )
    print(f"wrote {len(lambdas)} histograms to {r.out}")
    return EXIT_OK


def cmd_feasibility(r: Runner, args) -> int:
    eps = 0.2 if args.epsilon is None else args.epsilon
    xs = FEASIBILITY_X0 if args.x0_values is None else tuple(args.x0_values)
    xh = r.x_hat(eps)
    curves, summary, plot_data = [], [], {}
    for x0 in xs:
        t = r.mc_table(x0)
        full = t.full_value(eps)
        curves += [(x0, t.lam[j], t.y_star[j], t.h[j], t.u_c[j], full[j]) for j in range(t.lam.size)]
        plot_data[x0] = (t.lam, t.h, full)
        lag = lagrange_solve(x0, eps, r.problem)
        mc = invert_sweep(t, eps, "mc")
        summary.append((x0, xh, lag.feasibility.value, lag.lambda_star, mc.feasibility.value, mc.lambda_star))
    r.outputs.append(
        reports.write_csv(r.out / "feasibility_curves.csv",
                          ("x0", "lambda", "y_star", "h", "u_c", "full_value"), curves)
    )
    r.outputs.append(
        reports.write_csv(r.out / "feasibility_summary.csv",
                          ("x0", "x_hat", "lagrange", "lambda_lagrange", "mc", "lambda_mc"), summary)
    )
    if r.plot:
        from .plots import plot_feasibility

        r.outputs.append(plot_feasibility(plot_data, eps, r.out / "feasibility.png"))
    print(f"x_hat({eps:g}) = {xh:.6g}")
    return EXIT_OK


def cmd_table1(r: Runner, args) -> int:
    methods = args.methods.split(",")
    rows, failures = [], 0
    for eps in TABLE1_EPSILONS:
        for method in methods:
            try:
                sol = r.solve(eps, method)
                vals = [getattr(sol, c) for c in reports.TABLE_COLUMNS]
                status = sol.feasibility.value
            except QvarError as exc:
                log.error("epsilon=%g method=%s failed: %s", eps, method, exc)
                vals, status = [math.nan] * len(reports.TABLE_COLUMNS), "Error"
                failures += 1
            ref = reports.REFERENCE_TABLE.get((eps, method))
            for j, stat in enumerate(reports.TABLE_COLUMNS):
                p = ref[j] if ref else math.nan
                rows.append((eps, method, status, stat, vals[j], p, vals[j] - p))
    path = reports.write_csv(
        r.out / "table1.csv", ("epsilon", "method", "status", "statistic", "value", "reference", "diff"), rows
    )
    r.outputs.append(path)
    print(path.read_text(), end="")
    return EXIT_NUMERICAL if failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment JSON; missing keys take defaults")
    common.add_argument("--seed", type=int, help="overrides the simulation and network seeds")
    common.add_argument("--out", type=Path, help="output directory (default: config output_dir)")
    common.add_argument("--x0", type=float, help="initial wealth (default: config model.x0)")
    common.add_argument("--plot", action="store_true", help="also render PNG figures next to the CSVs")
    common.add_argument("--checkpoint", type=Path, help="trained network to use instead of training")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="qvar", description="S-shaped utility under a quantile constraint.")
    sub = p.add_subparsers(dest="command", required=True)
    methods = ("lagrange", "mc", "pinn")

    s = sub.add_parser("solve", parents=[common], help="one constrained solve")
    s.add_argument("--epsilon", type=float)
    s.add_argument("--method", choices=methods, default="lagrange")

    s = sub.add_parser("sweep", parents=[common], help="solutions over the epsilon grid")
    s.add_argument("--method", choices=methods, default="lagrange")

    s = sub.add_parser("dist", parents=[common], help="terminal wealth histograms")
    s.add_argument("--lambdas", type=float, nargs="+")

    s = sub.add_parser("feasibility", parents=[common], help="constraint and full value curves in lambda")
    s.add_argument("--epsilon", type=float)
    s.add_argument("--x0-values", type=float, nargs="+")

    s = sub.add_parser("table1", parents=[common], help="all methods at the reference epsilons")
    s.add_argument("--methods", default="lagrange,mc,pinn")
    return p


COMMANDS = {
    "solve": cmd_solve,
    "sweep": cmd_sweep,
    "dist": cmd_dist,
    "feasibility": cmd_feasibility,
    "table1": cmd_table1,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_(sim=replace(cfg.sim, seed=args.seed), pinn=replace(cfg.pinn, seed=args.seed))
        if getattr(args, "epsilon", None) is not None and not 0 <= args.epsilon <= 1:
            raise InvalidParameterError("epsilon must lie in [0, 1]")
        out = Path(args.out or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        x0 = cfg.model.x0 if args.x0 is None else args.x0
        if not x0 > 0:
            raise InvalidParameterError("x0 must be positive")
        r = Runner(cfg, out, x0, args.plot, args.checkpoint)
        code = COMMANDS[args.command](r, args)
        resolved = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "out")}
        reports.write_manifest(out, args.command, cfg.to_dict(), r.outputs, {"args": resolved})
        return code
    except InvalidParameterError as exc:
        print(f"qvar: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except QvarError as exc:
        print(f"qvar: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
