import numpy as np
import pytest

from wavepmp.grid import SQRT2, GridConfig, MetricFactor, WaveField
from wavepmp.layers import AffineLayer, IdentityLayer, SquaredLoss
from wavepmp.models import dataset_linreg, dataset_xor, least_squares, make_mlp
from wavepmp.pmp import NetworkSpec, NonFiniteError, backprop_oracle, oracle_field
from wavepmp.trainer import (InstabilityError, TrainConfig, WaveState, gradient_alignment, init_state,
                             relax, sgd_baseline, sync_step, train)
from wavepmp.verify import linear_net


def linear_scalar_net(ws=(0.9, 1.1, 0.8)):
    return NetworkSpec([AffineLayer([[w]], [0.1]) for w in ws], SquaredLoss())


def test_first_step_from_zero_waves():
    # literal transport; the balanced scheme already moves waves in phase A
    net = make_mlp([2, 3, 1], "tanh", seed=0)
    x, y = np.array([0.5, -1.0]), np.array([0.7])
    cfg = TrainConfig(GridConfig.from_courant(3, 0.5, alpha=1.0), eta=0.1, transport="upwind")
    state = init_state(net, cfg)
    new, info = sync_step(state, net, (x, y), cfg)
    assert all(np.all(v == 0) for v in info.nodes.x + info.nodes.lam)
    # node 0 also receives a source in phase C, so the clamp acts against a non-zero w_minus_0
    np.testing.assert_allclose(new.field.w_plus[0][:, 0], SQRT2 * x - new.field.w_minus[0][:, 0])
    grad0 = net.loss.grad(np.zeros((1, 1)), y[:, None])
    np.testing.assert_allclose(new.field.w_minus[2], new.field.w_plus[2] - SQRT2 * grad0)
    assert new.n == 1 and state.n == 0


def test_oracle_preload_gives_exact_gradient_step():
    net = NetworkSpec([AffineLayer([[1.5, -0.5]], [0.2])], SquaredLoss())
    x, y = np.array([1.0, 2.0]), np.array([0.3])
    eta = 0.1
    cfg = TrainConfig(GridConfig.from_courant(2, 0.5, alpha=1.0), eta=eta)
    state = WaveState(oracle_field(net, x, y), net.get_params(), cfg.make_port(net))
    new, info = sync_step(state, net, (x, y), cfg)
    assert max(np.abs(e).max() for e in info.residuals.E_plus + info.residuals.E_minus) < 1e-12
    grad = backprop_oracle(net, x, y).grads[0]
    np.testing.assert_allclose(new.params[0], net.get_params()[0] - eta * grad, atol=1e-14)


def test_pure_shift_with_zero_sources():
    N = 5
    net = NetworkSpec([IdentityLayer(1) for _ in range(N)], SquaredLoss())
    # with x_in = 0 and y = 0 every node wave pair built from zero states carries no residual
    rng = np.random.default_rng(0)
    a = rng.standard_normal(N + 1)
    field = WaveField([np.array([[v]]) for v in a], [np.array([[-v]]) for v in a])
    cfg = TrainConfig(GridConfig.from_courant(N + 1, 1.0, alpha=1.0), eta=0.0, transport="upwind")
    state = WaveState(field, net.get_params(), cfg.make_port(net))
    new, info = sync_step(state, net, (np.zeros(1), np.zeros(1)), cfg)
    for k in range(1, N + 1):
        assert info.transported.w_plus[k][0, 0] == a[k - 1]
        assert info.transported.w_minus[k - 1][0, 0] == -a[k]


def test_relax_three_layer_scalar_net():
    net = linear_scalar_net()
    x, y = np.array([1.0]), np.array([0.5])
    nu = 0.5
    cfg = TrainConfig(GridConfig.from_courant(4, nu, alpha=1.0), eta=0.0, budget=int(10 * 3 / nu), tol=1e-8)
    state, rows = relax(init_state(net, cfg), net, (x, y), cfg)
    assert rows[-1].max_node < 1e-8
    orc = backprop_oracle(net, x, y)
    nodes = state.nodes(net)
    for a, b in zip(nodes.x + nodes.lam, orc.states + orc.costates):
        np.testing.assert_allclose(np.ravel(a), np.ravel(b), atol=1e-7)


def test_relax_returns_immediately_on_oracle_preload():
    net = linear_scalar_net()
    x, y = np.array([1.0]), np.array([0.5])
    cfg = TrainConfig(GridConfig.from_courant(4, 0.5, alpha=1.0), eta=0.0, budget=50, tol=1e-10)
    state = WaveState(oracle_field(net, x, y), net.get_params(), cfg.make_port(net))
    out, rows = relax(state, net, (x, y), cfg)
    assert len(rows) <= 1 and out.n <= 1


def test_relax_flags_cfl_violation():
    net = linear_net(8)
    rng = np.random.default_rng(0)
    cfg = TrainConfig(GridConfig.from_courant(9, 1.5, alpha=0.5), eta=0.0, budget=500)
    with pytest.raises(InstabilityError) as err:
        relax(init_state(net, cfg), net, (rng.standard_normal(3), rng.standard_normal(3)), cfg)
    assert err.value.step is not None


def test_residual_decrease_frozen_linear():
    N = 8
    net = linear_net(N)
    rng = np.random.default_rng(1)
    cfg = TrainConfig(GridConfig.from_courant(N + 1, 1.0, alpha=0.5), eta=0.0, budget=20 * N)
    _, rows = relax(init_state(net, cfg), net, (rng.standard_normal(3), rng.standard_normal(3)), cfg)
    r = np.array([row.max_node for row in rows])
    tail = r[2 * N:]
    assert tail[-1] < 1e-3 * tail[0]
    ratio = (tail[-1] / tail[0]) ** (1.0 / (len(tail) - 1))
    assert ratio < 1


def test_train_eta_zero_keeps_params():
    X, Y = dataset_xor()
    net = make_mlp([2, 2, 1], "tanh", seed=0)
    before = [p.copy() for p in net.get_params()]
    cfg = TrainConfig(GridConfig.from_courant(3, 0.5, alpha=1.0), eta=0.0, budget=50)
    state, _ = train(net, [(X, Y)], cfg)
    assert all(np.array_equal(a, b) for a, b in zip(before, state.params))
    assert all(np.array_equal(a, b) for a, b in zip(before, net.get_params()))


def test_train_single_linear_layer_least_squares():
    X, Y, _, _ = dataset_linreg(64, 3, 1, noise=0.1, seed=0)
    net = make_mlp([3, 1], seed=0, batch_size=64)
    cfg = TrainConfig(GridConfig.from_courant(2, 0.5, alpha=1.0), eta=0.5, budget=2000, log_every=500)
    train(net, [(X, Y)], cfg)
    W, b = least_squares(X, Y)
    np.testing.assert_allclose(net.layers[0].W, W, atol=1e-4)
    np.testing.assert_allclose(net.layers[0].b, b, atol=1e-4)


def test_train_xor_against_sgd():
    X, Y = dataset_xor()
    net = make_mlp([2, 2, 1], "tanh", seed=0)
    cfg = TrainConfig(GridConfig.from_courant(3, 0.5, alpha=1.0), eta=0.2, budget=4000, update_every=4, log_every=500)
    _, sgd = sgd_baseline(net, [(X, Y)], 0.2, 1000)
    train(net, [(X, Y)], cfg)
    final = net.objective(X, Y)
    assert final <= 0.05 and final <= 2 * sgd[-1]


def test_metrics_rows_are_logged_and_deterministic():
    X, Y = dataset_xor()
    rows = []
    for _ in range(2):
        net = make_mlp([2, 2, 1], "tanh", seed=0)
        cfg = TrainConfig(GridConfig.from_courant(3, 0.5, alpha=1.0), eta=0.2, budget=95, log_every=10)
        rows.append(train(net, [(X, Y)], cfg)[1])
    assert [r.step for r in rows[0]] == list(range(10, 100, 10)) + [95]
    assert [r.as_dict() for r in rows[0]] == [r.as_dict() for r in rows[1]]
    assert all(r.wall_clock is None for r in rows[0])


def test_batches_rotate_without_resetting_waves():
    X, Y, _, _ = dataset_linreg(64, 3, 1, seed=2)
    batches = [(X[:, :32], Y[:, :32]), (X[:, 32:], Y[:, 32:])]
    net = make_mlp([3, 1], seed=0, batch_size=32)
    cfg = TrainConfig(GridConfig.from_courant(2, 0.5, alpha=1.0), eta=0.3, budget=1500, batch_every=50, log_every=100)
    train(net, batches, cfg)
    assert net.objective(X, Y) < 1e-8
    with pytest.raises(ValueError):
        train(net, [(X[:, :32], Y[:, :32]), (X[:, :16], Y[:, :16])], cfg)
    with pytest.raises(ValueError):
        train(net, [], cfg)


def test_divergence_raises_instability():
    X, Y, _, _ = dataset_linreg(64, 3, 1, seed=0)
    net = make_mlp([3, 1], seed=0)  # identity metrics on a large batch are unstable
    cfg = TrainConfig(GridConfig.from_courant(2, 0.5, alpha=1.0), eta=0.5, budget=500)
    with pytest.raises(InstabilityError):
        train(net, [(X, Y)], cfg)


def test_nonfinite_raises_with_step():
    net = linear_scalar_net()
    cfg = TrainConfig(GridConfig.from_courant(4, 0.5, alpha=1.0), eta=0.0)
    state = init_state(net, cfg)
    with pytest.raises(NonFiniteError) as err:
        sync_step(state, net, (np.array([np.nan]), np.array([0.0])), cfg)
    assert err.value.step == 1


@pytest.mark.parametrize("kind", ["resistive", "diagonal", "inductive"])
def test_optimizer_kinds_reduce_loss(kind):
    X, Y = dataset_xor()
    net = make_mlp([2, 2, 1], "tanh", seed=0)
    start = net.objective(X, Y)
    scales = [np.ones(p.size) for p in net.get_params()]
    cfg = TrainConfig(GridConfig.from_courant(3, 0.5, alpha=1.0), optimizer=kind, eta=0.2, diag_scales=scales,
                      R=1.0, L=1.0, budget=400, update_every=4)
    train(net, [(X, Y)], cfg)
    assert net.objective(X, Y) < start


def test_gradient_alignment_at_oracle():
    net = make_mlp([2, 3, 1], "tanh", seed=1)
    x, y = np.array([0.3, -0.2]), np.array([0.5])
    cfg = TrainConfig(GridConfig.from_courant(3, 0.5, alpha=1.0))
    state = WaveState(oracle_field(net, x, y), net.get_params(), cfg.make_port(net))
    assert gradient_alignment(net, state, (x, y)) == pytest.approx(1.0, abs=1e-12)


def test_config_validation():
    g = GridConfig.from_courant(3, 0.5)
    for bad in [dict(optimizer="adam"), dict(transport="leapfrog"), dict(scheduler="chaos"),
                dict(eta=-1.0), dict(update_every=0), dict(budget=-1)]:
        with pytest.raises(ValueError):
            TrainConfig(g, **bad)
