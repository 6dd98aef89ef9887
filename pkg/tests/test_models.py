import numpy as np
import pytest

from wavepmp.layers import AffineLayer, LayerMap
from wavepmp.models import (GradientCheckError, check_layer, dataset_linreg, dataset_xor, least_squares,
                            make_mlp, minibatches)


def test_mlp_is_deterministic_and_bounded():
    a, b = make_mlp([2, 2, 1], "tanh", seed=0), make_mlp([2, 2, 1], "tanh", seed=0)
    assert all(np.array_equal(p, q) for p, q in zip(a.get_params(), b.get_params()))
    c = make_mlp([2, 2, 1], "tanh", seed=1)
    assert not np.array_equal(a.get_params()[0], c.get_params()[0])
    for layer, n_in in zip(a.layers, [2, 2]):
        assert np.abs(layer.theta).max() <= 1 / np.sqrt(n_in)
    assert [l.activation for l in a.layers] == ["tanh", "identity"]


def test_scalar_linear_net():
    net = make_mlp([1, 1], seed=0)
    assert net.depth == 1 and net.widths == [1, 1]
    assert net.layers[0].activation == "identity"


def test_bad_widths():
    with pytest.raises(ValueError):
        make_mlp([3])
    with pytest.raises(ValueError):
        make_mlp([2, 0, 1])


class BrokenLayer(AffineLayer):
    def vjp(self, x, u, theta=None):
        return 2 * super().vjp(x, u, theta)


def test_check_layer_catches_wrong_derivative():
    assert check_layer(AffineLayer(np.ones((2, 3)), activation="tanh")) < 1e-6
    with pytest.raises(GradientCheckError):
        check_layer(BrokenLayer(np.ones((2, 3)), activation="tanh"))


def test_xor():
    X, Y = dataset_xor()
    assert X.shape == (2, 4) and Y.shape == (1, 4)
    np.testing.assert_array_equal(Y[0], np.logical_xor(X[0], X[1]).astype(float))


def test_linreg_recovers_planted_weights():
    X, Y, W, b = dataset_linreg(50, 4, 2, noise=0.0, seed=3)
    W2, b2 = least_squares(X, Y)
    np.testing.assert_allclose(W2, W, atol=1e-10)
    np.testing.assert_allclose(b2, b, atol=1e-10)


def test_linreg_seeded():
    a, b = dataset_linreg(seed=5, noise=0.1), dataset_linreg(seed=5, noise=0.1)
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


def test_minibatches():
    X, Y, _, _ = dataset_linreg(12)
    assert len(minibatches(X, Y)) == 1
    parts = minibatches(X, Y, 4)
    assert len(parts) == 3 and parts[1][0].shape == (3, 4)
    with pytest.raises(ValueError):
        minibatches(X, Y, 5)
