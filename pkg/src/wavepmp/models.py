"""Built-in networks, derivative checks and deterministic toy datasets."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .grid import matched_metrics
from .layers import AffineLayer, LOSSES, SquaredLoss
from .pmp import NetworkSpec


class GradientCheckError(AssertionError):
    """A layer's analytic derivatives disagree with finite differences."""


def check_layer(layer, rng=None, eps=1e-6, rtol=1e-5, batch=3):
    """Adjoint and central-difference checks of ``jvp``, ``vjp`` and ``param_vjp``.

    Raises :class:`GradientCheckError` on failure; returns the worst relative error.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    th = layer.theta
    x = rng.standard_normal((layer.in_dim, batch))
    v = rng.standard_normal((layer.in_dim, batch))
    u = rng.standard_normal((layer.out_dim, batch))
    worst = 0.0

    def rel(a, b):
        scale = max(1.0, np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
        return float(np.abs(a - b).max(initial=0.0) / scale)

    # adjoint identity  <u, J v> = <J^T u, v>
    lhs = float(np.sum(u * layer.jvp(x, v, th)))
    rhs = float(np.sum(layer.vjp(x, u, th) * v))
    worst = max(worst, rel(np.array(lhs), np.array(rhs)))
    # state derivative
    fd = (layer.forward(x + eps * v, th) - layer.forward(x - eps * v, th)) / (2 * eps)
    worst = max(worst, rel(fd, layer.jvp(x, v, th)))
    # parameter derivative, checked along a random direction
    if th.size:
        d = rng.standard_normal(th.size)
        fd_p = (np.sum(u * layer.forward(x, th + eps * d)) - np.sum(u * layer.forward(x, th - eps * d))) / (2 * eps)
        an_p = float(np.dot(layer.param_vjp(x, u, th), d))
        worst = max(worst, rel(np.array(fd_p), np.array(an_p)))
    if worst > rtol:
        raise GradientCheckError(f"{layer!r}: derivative check failed (rel err {worst:.2e})")
    return worst


def make_mlp(widths: Sequence[int], activation="tanh", seed=0, loss="squared",
             output_activation="identity", penalty=None, check=True,
             batch_size=None) -> NetworkSpec:
    """Fully connected network with hidden ``activation`` and a linear output by default.

    Weights and biases are drawn uniform in ``+-1/sqrt(fan_in)`` from a seeded
    generator.  Every layer passes :func:`check_layer` before it is returned.
    With ``batch_size`` the node metrics are :func:`matched_metrics` for that
    batch, otherwise identities.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise ValueError(f"widths must list at least two positive sizes, got {widths}")
    rng = np.random.default_rng(seed)
    layers = []
    for k, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / np.sqrt(n_in)
        W = rng.uniform(-bound, bound, size=(n_out, n_in))
        b = rng.uniform(-bound, bound, size=n_out)
        act = output_activation if k == len(widths) - 2 else activation
        layers.append(AffineLayer(W, b, act, penalty))
    if check:
        check_rng = np.random.default_rng(seed + 1)
        for layer in layers:
            check_layer(layer, check_rng)
    loss_obj = LOSSES[loss]() if isinstance(loss, str) else loss
    thetas = None if batch_size is None else matched_metrics(widths, int(batch_size))
    return NetworkSpec(layers, loss_obj, thetas)


def dataset_xor():
    """The four XOR points as ``(X, Y)`` with samples in columns."""
    X = np.array([[0.0, 0.0, 1.0, 1.0],
                  [0.0, 1.0, 0.0, 1.0]])
    Y = np.array([[0.0, 1.0, 1.0, 0.0]])
    return X, Y


def dataset_linreg(n=64, dim=3, out_dim=1, noise=0.0, seed=0):
    """Planted linear regression ``Y = W X + b + noise``.

    Returns ``(X, Y, W, b)`` with samples in columns.
    """
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((out_dim, dim))
    b = rng.standard_normal(out_dim)
    X = rng.standard_normal((dim, n))
    Y = W @ X + b[:, None] + noise * rng.standard_normal((out_dim, n))
    return X, Y, W, b


def least_squares(X, Y):
    """Normal-equation solution ``(W, b)`` of ``min |W X + b - Y|^2``."""
    A = np.vstack([X, np.ones((1, X.shape[1]))])
    sol = np.linalg.solve(A @ A.T, A @ Y.T).T
    return sol[:, :-1], sol[:, -1]


def minibatches(X, Y, batch_size=None):
    """Split column-sample arrays into equal consecutive batches (full batch by default)."""
    n = X.shape[1]
    if batch_size is None or batch_size >= n:
        return [(X, Y)]
    if n % batch_size:
        raise ValueError(f"{n} samples do not split into batches of {batch_size}")
    return [(X[:, i:i + batch_size], Y[:, i:i + batch_size]) for i in range(0, n, batch_size)]
