"""Layer maps, penalties and terminal losses with analytic derivatives.

A layer maps node ``k`` to node ``k+1``.  All methods act column-wise on
``(n, B)`` batches; a 1-D input is treated as a single column.
"""

from __future__ import annotations

import numpy as np


def _as_cols(x):
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def _like(result, ref):
    ref = np.asarray(ref)
    return result[:, 0] if ref.ndim == 1 else result


# --- penalties ---------------------------------------------------------------


class ZeroPenalty:
    def value(self, x, theta):
        return 0.0

    def grad_x(self, x, theta):
        return np.zeros_like(np.asarray(x, dtype=float))

    def grad_theta(self, x, theta):
        return np.zeros_like(np.asarray(theta, dtype=float))

    def __repr__(self):
        return "ZeroPenalty()"


class L2Penalty:
    """``R(x, theta) = mu/2 * |theta|^2`` (independent of the state)."""

    def __init__(self, mu):
        self.mu = float(mu)

    def value(self, x, theta):
        return 0.5 * self.mu * float(np.dot(theta, theta))

    def grad_x(self, x, theta):
        return np.zeros_like(np.asarray(x, dtype=float))

    def grad_theta(self, x, theta):
        return self.mu * np.asarray(theta, dtype=float)

    def __repr__(self):
        return f"L2Penalty(mu={self.mu})"


# --- layers ------------------------------------------------------------------


class LayerMap:
    """Base class for a parameterized map ``x_{k+1} = f(x_k; theta_k)``.

    Subclasses implement ``forward``, ``jvp``, ``vjp`` and ``param_vjp`` for a
    column batch.  ``theta`` is always a flat float vector.
    """

    in_dim: int
    out_dim: int

    def __init__(self, theta, penalty=None):
        self.theta = np.array(theta, dtype=float).ravel()
        self.penalty = penalty if penalty is not None else ZeroPenalty()

    @property
    def num_params(self) -> int:
        return self.theta.size

    def set_theta(self, theta):
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.shape != self.theta.shape:
            raise ValueError(f"expected {self.theta.shape} parameters, got {theta.shape}")
        self.theta = theta.copy()

    def forward(self, x, theta=None):
        raise NotImplementedError

    def jvp(self, x, v, theta=None):
        raise NotImplementedError

    def vjp(self, x, u, theta=None):
        raise NotImplementedError

    def param_vjp(self, x, u, theta=None):
        raise NotImplementedError

    def jacobian(self, x, theta=None):
        """Dense Jacobian at a single sample (for oracles and small tests)."""
        x = np.asarray(x, dtype=float).reshape(-1)
        cols = [self.jvp(x, e, theta) for e in np.eye(self.in_dim)]
        return np.column_stack(cols) if cols else np.zeros((self.out_dim, 0))

    def penalty_value(self, x, theta=None):
        return self.penalty.value(x, self.theta if theta is None else theta)

    def penalty_grad_x(self, x, theta=None):
        return self.penalty.grad_x(x, self.theta if theta is None else theta)

    def penalty_grad_theta(self, x, theta=None):
        return self.penalty.grad_theta(x, self.theta if theta is None else theta)


_ACTIVATIONS = ("identity", "tanh", "relu")


class AffineLayer(LayerMap):
    """``f(x) = act(W x + b)`` with activation in identity / tanh / relu.

    Parameters are packed as ``[W.ravel(), b]``.  The ReLU derivative at zero
    is taken to be 0.
    """

    def __init__(self, W, b=None, activation="identity", penalty=None):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; choose from {_ACTIVATIONS}")
        self.out_dim, self.in_dim = W.shape
        b = np.zeros(self.out_dim) if b is None else np.asarray(b, dtype=float).ravel()
        if b.shape != (self.out_dim,):
            raise ValueError(f"bias shape {b.shape} does not match W {W.shape}")
        self.activation = activation
        super().__init__(np.concatenate([W.ravel(), b]), penalty)

    def unpack(self, theta=None):
        theta = self.theta if theta is None else np.asarray(theta, dtype=float)
        nW = self.out_dim * self.in_dim
        return theta[:nW].reshape(self.out_dim, self.in_dim), theta[nW:]

    @property
    def W(self):
        return self.unpack()[0]

    @property
    def b(self):
        return self.unpack()[1]

    def _pre(self, X, theta):
        W, b = self.unpack(theta)
        return W @ X + b[:, None]

    def _act(self, z):
        if self.activation == "tanh":
            return np.tanh(z)
        if self.activation == "relu":
            return np.maximum(z, 0.0)
        return z

    def _dact(self, z):
        if self.activation == "tanh":
            t = np.tanh(z)
            return 1.0 - t * t
        if self.activation == "relu":
            return (z > 0).astype(float)
        return np.ones_like(z)

    def forward(self, x, theta=None):
        X = _as_cols(x)
        return _like(self._act(self._pre(X, theta)), x)

    def jvp(self, x, v, theta=None):
        X, V = _as_cols(x), _as_cols(v)
        W, _ = self.unpack(theta)
        return _like(self._dact(self._pre(X, theta)) * (W @ V), v)

    def vjp(self, x, u, theta=None):
        X, U = _as_cols(x), _as_cols(u)
        W, _ = self.unpack(theta)
        return _like(W.T @ (self._dact(self._pre(X, theta)) * U), u)

    def param_vjp(self, x, u, theta=None):
        X, U = _as_cols(x), _as_cols(u)
        G = self._dact(self._pre(X, theta)) * U
        return np.concatenate([(G @ X.T).ravel(), G.sum(axis=1)])

    def __repr__(self):
        return f"AffineLayer({self.in_dim}->{self.out_dim}, {self.activation})"


class IdentityLayer(LayerMap):
    """Parameter-free identity map (useful for transport tests)."""

    def __init__(self, n):
        self.in_dim = self.out_dim = n
        super().__init__(np.zeros(0))

    def forward(self, x, theta=None):
        return np.array(x, dtype=float)

    def jvp(self, x, v, theta=None):
        return np.array(v, dtype=float)

    def vjp(self, x, u, theta=None):
        return np.array(u, dtype=float)

    def param_vjp(self, x, u, theta=None):
        return np.zeros(0)


# --- terminal losses ---------------------------------------------------------


class SquaredLoss:
    """Batch-mean of ``1/2 |x - y|^2``."""

    name = "squared"

    def value(self, x, y):
        X, Y = _as_cols(x), _as_cols(y)
        return 0.5 * float(np.sum((X - Y) ** 2)) / X.shape[1]

    def grad(self, x, y):
        X, Y = _as_cols(x), _as_cols(y)
        return _like((X - Y) / X.shape[1], x)

    def hessian_scale(self, batch):
        return 1.0 / batch


def _softmax(Z):
    Z = Z - Z.max(axis=0, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=0, keepdims=True)


class SoftmaxCrossEntropy:
    """Batch-mean cross entropy of ``softmax(x)`` against one-hot targets ``y``."""

    name = "softmax_ce"

    def value(self, x, y):
        X, Y = _as_cols(x), _as_cols(y)
        Z = X - X.max(axis=0, keepdims=True)
        logp = Z - np.log(np.exp(Z).sum(axis=0, keepdims=True))
        return -float(np.sum(Y * logp)) / X.shape[1]

    def grad(self, x, y):
        X, Y = _as_cols(x), _as_cols(y)
        return _like((_softmax(X) - Y) / X.shape[1], x)


class CallableLoss:
    """Terminal loss assembled from user callables acting on single columns."""

    name = "callable"

    def __init__(self, value, grad):
        self._value = value
        self._grad = grad

    def value(self, x, y):
        X = _as_cols(x)
        return float(sum(self._value(X[:, j]) for j in range(X.shape[1])))

    def grad(self, x, y):
        X = _as_cols(x)
        G = np.column_stack([np.asarray(self._grad(X[:, j]), dtype=float)
                             for j in range(X.shape[1])])
        return _like(G, x)


LOSSES = {"squared": SquaredLoss, "softmax_ce": SoftmaxCrossEntropy}
