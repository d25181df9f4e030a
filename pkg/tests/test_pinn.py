import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from qvar.errors import InvalidParameterError, TrainingError
from qvar.lagrange import dual_value
from qvar.model import ModelParams
from qvar.pinn import (
    BoundarySignal,
    PinnConfig,
    PinnModel,
    loss,
    loss_terms,
    pde_operator,
    pde_residual,
    sample_points,
    solve_y_star,
    terminal_targets,
    train,
)
from qvar.problem import Problem

PARAMS = ModelParams()
NAMES = ("v", "t", "y", "yy", "mumu", "ymu")


def _point(rng):
    return np.array([rng.uniform(0, 1), rng.uniform(0.3, 1.9), rng.uniform(0.035, 0.095), rng.uniform(0, 2.5)])


def _fd_derivatives(m, p, h=1e-4):
    """Central differences at steps h and h/2 combined by Richardson extrapolation.

    First derivatives difference the value; second derivatives difference the
    first derivatives, which this same oracle checks.
    """
    a, b = _fd_once(m, p, h), _fd_once(m, p, h / 2)
    return {k: (4 * b[k] - a[k]) / 3 for k in a}


def _fd_once(m, p, h):
    # steps scaled per coordinate so each is h in normalised units
    s = h / m.scale.numpy()
    e = np.eye(4)

    def d(q):
        with torch.no_grad():
            out = m.derivatives(torch.as_tensor(q.reshape(1, 4)))
        return {k: float(v[0]) for k, v in out.items()}

    def central(k, name):
        return (d(p + s[k] * e[k])[name] - d(p - s[k] * e[k])[name]) / (2 * s[k])

    return {
        "t": central(0, "v"),
        "y": central(1, "v"),
        "mu": central(2, "v"),
        "yy": central(1, "y"),
        "mumu": central(2, "mu"),
        "ymu": central(2, "y"),
    }


def test_constant_network():
    m = PinnModel.initialize(5, PinnConfig(), 1.0)
    m.A3.zero_()
    m.b3.fill_(0.7)
    vals = m.eval_with_input_derivatives([0.3, 1.0, 0.06, 1.0])
    assert vals[0] == pytest.approx(0.7)
    assert all(v == 0 for v in vals[1:])
    assert float(pde_residual([[0.3, 1.0, 0.06, 1.0]], m, PARAMS)[0]) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_input_derivatives_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = PinnModel.initialize(5, PinnConfig(), 1.0, seed=seed)
    m.b1.copy_(torch.as_tensor(rng.normal(0, 0.5, 5)))
    m.b2.copy_(torch.as_tensor(rng.normal(0, 0.5, 5)))
    p = _point(rng)
    exact = dict(zip(NAMES, m.eval_with_input_derivatives(p)))
    fd = _fd_derivatives(m, p)
    for name in NAMES[1:]:
        assert fd[name] == pytest.approx(exact[name], rel=1e-5, abs=1e-8), name


def test_linear_network_has_no_curvature():
    m = PinnModel.initialize(5, PinnConfig(), 1.0, activation="identity")
    d = m.eval_with_input_derivatives([0.2, 0.8, 0.05, 0.4])
    assert d[3] == pytest.approx(0.0, abs=1e-14)
    assert d[4] == pytest.approx(0.0, abs=1e-14)


def test_residual_reduces_at_edge_of_drift_range():
    m = PinnModel.initialize(5, PinnConfig(), 1.0, seed=3)
    p = [0.4, 1.2, PARAMS.mu_l, 0.9]
    v, vt, vy, vyy, vmm, vym = m.eval_with_input_derivatives(p)
    mpr = (PARAMS.mu_l - PARAMS.r) / PARAMS.sigma
    expected = vt - PARAMS.r * 1.2 * vy + 0.5 * 1.2**2 * mpr**2 * vyy
    with torch.no_grad():
        got = float(pde_residual([p], m, PARAMS)[0])
    assert got == pytest.approx(expected, rel=1e-12)


def test_operator_annihilates_the_exact_dual_value():
    prob = Problem()
    rng = np.random.default_rng(0)
    v = lambda t, y, m, l: dual_value(t, y, m, l, prob)
    for _ in range(10):
        t, y, m, l = rng.uniform(0.1, 0.8), rng.uniform(0.4, 1.8), rng.uniform(0.04, 0.09), rng.uniform(0, 2.5)
        ht, hy, hm = 1e-4, 1e-3, 1e-4
        vt = (v(t + ht, y, m, l) - v(t - ht, y, m, l)) / (2 * ht)
        vy = (v(t, y + hy, m, l) - v(t, y - hy, m, l)) / (2 * hy)
        vyy = (v(t, y + hy, m, l) - 2 * v(t, y, m, l) + v(t, y - hy, m, l)) / hy**2
        vmm = (v(t, y, m + hm, l) - 2 * v(t, y, m, l) + v(t, y, m - hm, l)) / hm**2
        vym = (v(t, y + hy, m + hm, l) - v(t, y + hy, m - hm, l) - v(t, y - hy, m + hm, l)
               + v(t, y - hy, m - hm, l)) / (4 * hy * hm)
        assert abs(pde_operator(y, m, vt, vy, vyy, vmm, vym, PARAMS)) <= 1e-3


def _small_problem(n=3, K_c=12, K_b=6, seed=1):
    prob = Problem()
    cfg = PinnConfig(nodes=n, K_c=K_c, K_b=K_b, seed=seed)
    colloc, bound = sample_points(cfg, 1.0, np.random.default_rng(seed))
    return prob, cfg, colloc, bound, terminal_targets(bound, prob.knots)


def test_parameter_gradients_match_finite_differences():
    prob, cfg, colloc, bound, targets = _small_problem()
    m = PinnModel.initialize(3, cfg, 1.0, seed=11)
    assert m.n_parameters <= 50
    for p in m.parameters:
        p.requires_grad_(True)
    a, b = loss_terms(m, colloc, bound, targets, PARAMS)
    grads = torch.autograd.grad(a + b, m.parameters)
    h = 1e-5
    for p, g in zip(m.parameters, grads):
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + h
                up = sum(loss_terms(m, colloc, bound, targets, PARAMS)).item()
                flat[i] = old - h
                dn = sum(loss_terms(m, colloc, bound, targets, PARAMS)).item()
                flat[i] = old
            fd = (up - dn) / (2 * h)
            assert fd == pytest.approx(g.view(-1)[i].item(), rel=1e-5, abs=1e-8)


def test_loss_decomposition():
    prob, cfg, colloc, bound, targets = _small_problem(n=4, K_c=30, K_b=20)
    m = PinnModel.initialize(4, cfg, 1.0)
    a, b = loss_terms(m, colloc, bound, targets, PARAMS)
    assert a.item() >= 0 and b.item() >= 0
    assert loss(m, colloc, bound, PARAMS, prob.knots) == pytest.approx(a.item() + b.item())
    # fit the output bias so a constant matches one boundary target exactly
    m.A3.zero_()
    m.b3.fill_(float(targets[0]))
    a, b = loss_terms(m, colloc, bound[:1], targets[:1], PARAMS)
    assert b.item() == 0.0 and a.item() == 0.0


def test_short_training_is_deterministic():
    prob = Problem()
    cfg = PinnConfig(nodes=8, K_c=64, K_b=16, max_steps=30, log_every=1, seed=4)
    a = train(cfg, prob.model, prob.knots)
    b = train(cfg, prob.model, prob.knots)
    assert a.history == b.history
    assert a.history[-1][1] < a.history[0][1]


def test_nan_loss_aborts_with_snapshot(monkeypatch):
    import qvar.pinn as pinn

    prob = Problem()
    real = pinn.loss_terms
    calls = {"n": 0}

    def poisoned(*args):
        calls["n"] += 1
        a, b = real(*args)
        return (a * math.nan, b) if calls["n"] > 3 else (a, b)

    monkeypatch.setattr(pinn, "loss_terms", poisoned)
    with pytest.raises(TrainingError) as err:
        train(PinnConfig(nodes=4, K_c=16, K_b=8, max_steps=10), prob.model, prob.knots)
    assert err.value.snapshot["step"] == 4
    assert all(torch.isfinite(p).all() for p in err.value.snapshot["parameters"])


def test_loss_tolerance_stops_training():
    prob = Problem()
    m = train(PinnConfig(nodes=4, K_c=16, K_b=8, max_steps=500, loss_tol=1e3), prob.model, prob.knots)
    assert m.meta["steps"] == 1


def test_checkpoint_round_trip(tmp_path):
    m = PinnModel.initialize(6, PinnConfig(), 1.0, seed=9)
    m.history = [(1, 2.0, 1.5, 0.5)]
    m.save(tmp_path / "m.json")
    back = PinnModel.load(tmp_path / "m.json")
    for a, b in zip(m.parameters, back.parameters):
        assert torch.equal(a, b)
    assert np.array_equal(m.lower, back.lower) and back.history == m.history


def test_config_validation():
    with pytest.raises(InvalidParameterError):
        PinnConfig(nodes=0)
    with pytest.raises(InvalidParameterError):
        PinnConfig(loss_tol=0)
    with pytest.raises(InvalidParameterError):
        PinnConfig(y_domain=(2.0, 1.0))
    assert PinnConfig.full().nodes == 100 and PinnConfig.full().max_steps == 100_000


def test_boundary_signal_without_interior_root():
    m = PinnModel.initialize(4, PinnConfig(), 1.0)
    m.A3.zero_()  # dv/dy = 0, so dv/dy + x0 never changes sign
    with pytest.raises(BoundarySignal):
        solve_y_star(0.0, 1.0, m, 0.07)


# -- trained desk-profile network -------------------------------------------


def _exact_y_star(lam, prob):
    mu0 = prob.model.mu_hat0

    def g(y, h=1e-5):
        return (dual_value(0, y + h, mu0, lam, prob) - dual_value(0, y - h, mu0, lam, prob)) / (2 * h) + 1.0

    return brentq(g, 0.3, 2.5, xtol=1e-8)


@pytest.mark.slow
def test_trained_y_star(desk_pinn, problem):
    m, _ = desk_pinn
    mu0 = problem.model.mu_hat0
    y0 = solve_y_star(0.0, 1.0, m, mu0)
    assert y0 == pytest.approx(0.94, abs=0.05)
    for lam in (0.0, 1.0, 2.0):
        y = solve_y_star(lam, 1.0, m, mu0)
        lo, hi = m.dv_dy(0.0, [y - 1e-3, y + 1e-3], mu0, lam) + 1.0
        assert lo * hi <= 0
        assert y == pytest.approx(_exact_y_star(lam, problem), abs=0.05)


@pytest.mark.slow
def test_trained_convexity_proxy(desk_pinn):
    m, _ = desk_pinn
    rng = np.random.default_rng(21)
    X = torch.as_tensor(np.array([_point(rng) for _ in range(100)]))
    with torch.no_grad():
        vyy = m.derivatives(X)["yy"].numpy()
    assert vyy.min() >= -0.05


@pytest.mark.slow
def test_training_curve_moving_average(desk_pinn):
    m, _ = desk_pinn
    h = np.array(m.history)
    steps, losses = h[:, 0], h[:, 1]
    window = 1000
    ma = np.array([losses[(steps > s - window) & (steps <= s)].mean() for s in steps if s >= window])
    # successive 1000-step windows: no rise beyond 10%
    stride = int(window // np.diff(steps[1:]).min())
    assert np.all(ma[stride:] <= 1.1 * ma[:-stride])
