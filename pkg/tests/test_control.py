import itertools

import numpy as np
import pytest

from wavepmp.control import (ControlProblem, control_hessians, controls_of, euler_layerize, lqr_riccati_oracle,
                             make_problem, scalar_lqr, scaled_residuals)
from wavepmp.grid import GridConfig
from wavepmp.pmp import backprop_oracle, forward_rollout, param_residual
from wavepmp.ports import NotPositiveDefiniteError
from wavepmp.trainer import TrainConfig, train


def riccati_for(p):
    lin = p.linear
    return lqr_riccati_oracle(lin["A"], lin["B"], lin["Q"], lin["R"], lin["Q_T"], p.T, p.N, p.x0)


def test_layerize_substitution_n2():
    p = scalar_lqr(T=1.0, N=2)
    net = euler_layerize(p)
    x, u = np.array([0.8]), np.array([-0.4])
    layer = net.layers[0]
    np.testing.assert_allclose(layer.forward(x, u), x + 0.5 * u)
    assert layer.penalty_value(x, u) == pytest.approx(0.25 * (0.8**2 + 0.4**2))


def test_layerize_trivial_problem():
    p = ControlProblem(f=lambda x, u: np.zeros(2), f_x=lambda x, u: np.zeros((2, 2)), f_u=lambda x, u: np.zeros((2, 1)),
                       L=lambda x, u: 0.0, L_x=lambda x, u: np.zeros(2), L_u=lambda x, u: np.zeros(1),
                       Phi=lambda x: 0.0, Phi_x=lambda x: np.zeros(2), T=1.0, N=4, x0=np.array([1.0, -1.0]), m=1)
    net = euler_layerize(p, np.ones((4, 1)))
    xs = forward_rollout(net, p.x0)
    assert all(np.allclose(np.ravel(x), p.x0) for x in xs)
    assert all(l.penalty_value(p.x0, np.ones(1)) == 0.0 for l in net.layers)


@pytest.mark.parametrize("name", ["scalar_lqr", "lqr_2d", "pendulum"])
def test_discrete_gradient_matches_fd(name):
    p = make_problem(name, N=8)
    rng = np.random.default_rng(0)
    u = rng.standard_normal((8, p.m)) * 0.3
    net = euler_layerize(p, u)
    x0, y = np.asarray(p.x0, dtype=float), np.zeros(1)
    grads = np.concatenate(backprop_oracle(net, x0, y).grads)
    flat = u.ravel()
    eps = 1e-6
    fd = []
    for i in range(flat.size):
        d = np.zeros_like(flat)
        d[i] = eps
        fd.append((net.objective(x0, y, list((flat + d).reshape(u.shape)))
                   - net.objective(x0, y, list((flat - d).reshape(u.shape)))) / (2 * eps))
    np.testing.assert_allclose(grads, fd, rtol=1e-5, atol=1e-8)


def test_scaled_residuals_vanish_on_riccati_solution():
    p = scalar_lqr(N=16)
    sol = riccati_for(p)
    E_x, E_lam = scaled_residuals(sol.x, sol.lam, sol.u, p)
    assert max(np.abs(e).max() for e in E_x + E_lam) <= 1e-10


def test_scaled_state_residual_perturbation():
    p = scalar_lqr(N=16)
    sol = riccati_for(p)
    xs = [x.copy() for x in sol.x]
    delta = 1e-3
    xs[5] = xs[5] + delta
    E_x, _ = scaled_residuals(xs, sol.lam, sol.u, p)
    assert E_x[4][0] == pytest.approx(delta / p.dt, rel=1e-9)


def test_continuous_solution_residual_is_first_order():
    T, x0 = 1.0, 1.0
    errs, hs = [], []
    for N in (16, 32, 64, 128):
        p = scalar_lqr(T=T, N=N, x0=x0)
        t = p.times
        x = [np.array([x0 * np.cosh(T - s) / np.cosh(T)]) for s in t]
        lam = [np.array([x0 * np.sinh(T - s) / np.cosh(T)]) for s in t]
        u = [-lam[k] for k in range(N)]
        E_x, E_lam = scaled_residuals(x, lam, u, p)
        errs.append(max(np.abs(e).max() for e in E_x + E_lam))
        hs.append(p.dt)
    assert np.polyfit(np.log(hs), np.log(errs), 1)[0] >= 0.8


def test_riccati_converges_to_tanh():
    errs = []
    Ns = (16, 32, 64, 128)
    for N in Ns:
        sol = lqr_riccati_oracle([[0.0]], [[1.0]], [[1.0]], [[1.0]], [[0.0]], 1.0, N)
        t = np.linspace(0, 1, N + 1)
        errs.append(max(abs(sol.P[k][0, 0] - np.tanh(1 - t[k])) for k in range(N + 1)))
    assert np.polyfit(np.log(1.0 / np.array(Ns)), np.log(errs), 1)[0] >= 0.8


def test_riccati_zero_cost():
    sol = lqr_riccati_oracle([[0.3]], [[1.0]], [[0.0]], [[1.0]], [[0.0]], 1.0, 8, [1.0])
    assert all(np.all(P == 0) for P in sol.P) and all(np.all(u == 0) for u in sol.u)


def test_riccati_rejects_non_spd_r():
    with pytest.raises(NotPositiveDefiniteError):
        lqr_riccati_oracle([[0.0]], [[1.0]], [[1.0]], [[-1.0]], [[0.0]], 1.0, 4)


def test_riccati_n2_brute_force():
    p = scalar_lqr(T=1.0, N=2, x0=1.0)
    sol = riccati_for(p)
    net = euler_layerize(p)
    x0 = np.asarray(p.x0, dtype=float)
    grid = np.linspace(-2.0, 2.0, 401)
    best, arg = np.inf, None
    for u0, u1 in itertools.product(grid, grid):
        J = net.objective(x0, np.zeros(1), [np.array([u0]), np.array([u1])])
        if J < best:
            best, arg = J, (u0, u1)
    assert sol.cost <= best + 1e-12
    np.testing.assert_allclose(arg, np.ravel(sol.u), atol=0.01)
    assert best - sol.cost < 1e-3


def test_riccati_stationarity():
    p = scalar_lqr(N=16)
    sol = riccati_for(p)
    net = euler_layerize(p, np.array(sol.u))
    for k, layer in enumerate(net.layers):
        r = param_residual(layer, sol.x[k], sol.lam[k + 1], sol.u[k])
        assert np.abs(r).max() <= 1e-10


def test_wave_relaxation_matches_riccati_2d():
    p = make_problem("lqr_2d", N=20)
    net = euler_layerize(p)
    cfg = TrainConfig(GridConfig.from_courant(p.N + 1, 0.5, alpha=1.0), optimizer="curvature", eta=1.0,
                      hessians=control_hessians(p, net), budget=3000, tol=1e-12, log_every=100)
    state, _ = train(net, [(p.x0, np.zeros(1))], cfg)
    err = np.abs(controls_of(state.params) - np.array(riccati_for(p).u)).max()
    assert err <= 1e-3


def test_unknown_problem():
    with pytest.raises(KeyError):
        make_problem("cartpole")
