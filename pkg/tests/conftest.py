import os

import numpy as np
import pytest

from qvar.dual_mc import SimConfig, simulate_paths
from qvar.problem import Problem

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def problem():
    return Problem()


@pytest.fixture(scope="session")
def sim_cfg():
    return SimConfig()


@pytest.fixture(scope="session")
def pool(problem, sim_cfg):
    return simulate_paths(sim_cfg, problem.model)


@pytest.fixture(scope="session")
def desk_pinn(problem, request):
    """Desk-profile network, trained once and cached across runs by config hash."""
    from qvar.pinn import PinnConfig, PinnModel, train

    cfg = PinnConfig()
    digest = cfg.digest(problem.model)
    cache_dir = request.config.cache.mkdir("qvar-pinn")
    path = cache_dir / f"desk_{digest}.json"
    if path.exists() and not os.environ.get("QVAR_RETRAIN"):
        model = PinnModel.load(path)
        if model.meta.get("config_hash") == digest:
            return model, path
    log_path = cache_dir / f"desk_{digest}_log.csv"
    model = train(cfg, problem.model, problem.knots, log_path=log_path)
    model.save(path)
    return model, path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


_SMALL = {}


def _small_pool():
    """Small pool for property tests that call into it many times."""
    if not _SMALL:
        p = Problem()
        _SMALL["v"] = (simulate_paths(SimConfig(M=4000, N=20, seed=3), p.model), p.knots)
    return _SMALL["v"]
