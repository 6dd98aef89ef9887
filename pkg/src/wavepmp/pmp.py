"""Discrete maximum-principle machinery for layered maps.

Contains the forward rollout and adjoint recursion (the sequential backprop
oracle), the node residuals that vanish exactly on the oracle trajectory,
their wave-coordinate form, and the parameter stationarity residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .grid import SQRT2, DimensionError, MetricFactor, WaveField, default_metrics
from .layers import SquaredLoss, _as_cols


class NonFiniteError(FloatingPointError):
    """A rollout or relaxation produced NaN or inf."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class NetworkSpec:
    """An ordered stack of layer maps with a terminal loss and node metrics."""

    def __init__(self, layers, loss=None, thetas: Optional[Sequence[MetricFactor]] = None):
        self.layers = list(layers)
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        for k in range(len(self.layers) - 1):
            if self.layers[k].out_dim != self.layers[k + 1].in_dim:
                raise DimensionError(
                    f"layer {k} outputs {self.layers[k].out_dim} but layer {k + 1} "
                    f"expects {self.layers[k + 1].in_dim}")
        self.loss = loss if loss is not None else SquaredLoss()
        self.thetas = list(thetas) if thetas is not None else default_metrics(self.widths)
        if [t.n for t in self.thetas] != self.widths:
            raise DimensionError(f"metric widths {[t.n for t in self.thetas]} != {self.widths}")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def widths(self) -> List[int]:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    def get_params(self):
        return [layer.theta.copy() for layer in self.layers]

    def set_params(self, params):
        for layer, p in zip(self.layers, params):
            layer.set_theta(p)

    def objective(self, x_in, y, params=None) -> float:
        """Total objective ``loss(x_N, y) + sum_k R_k(x_k, theta_k)``."""
        params = self.get_params() if params is None else params
        xs = forward_rollout(self, x_in, params)
        J = self.loss.value(xs[-1], y)
        for k, layer in enumerate(self.layers):
            J += layer.penalty.value(xs[k], params[k])
        return J


@dataclass
class ResidualSet:
    r_x: List[np.ndarray]
    r_lam: List[np.ndarray]
    r_theta: List[np.ndarray] = field(default_factory=list)
    E_plus: List[np.ndarray] = field(default_factory=list)
    E_minus: List[np.ndarray] = field(default_factory=list)

    @staticmethod
    def _max_norm(vs):
        return max((float(np.linalg.norm(v)) for v in vs), default=0.0)

    @property
    def max_rx(self) -> float:
        return self._max_norm(self.r_x)

    @property
    def max_rlam(self) -> float:
        return self._max_norm(self.r_lam)

    @property
    def max_rtheta(self) -> float:
        return self._max_norm(self.r_theta)

    @property
    def max_node(self) -> float:
        return max(self.max_rx, self.max_rlam)


@dataclass
class OracleResult:
    states: List[np.ndarray]
    costates: List[np.ndarray]
    grads: List[np.ndarray]
    loss: float
    objective: float


def _param(net, params, k):
    return net.layers[k].theta if params is None else params[k]


def discrete_hamiltonian(layer, x_k, lam_k1, theta_k=None) -> float:
    """``H_k = lam_{k+1}^T f_k(x_k; theta_k) + R_k(x_k, theta_k)``."""
    theta_k = layer.theta if theta_k is None else theta_k
    out = layer.forward(x_k, theta_k)
    lam_k1 = np.asarray(lam_k1, dtype=float)
    if np.shape(out) != lam_k1.shape:
        raise DimensionError(f"costate {lam_k1.shape} does not match layer output {np.shape(out)}")
    return float(np.sum(lam_k1 * out)) + layer.penalty.value(x_k, theta_k)


def forward_rollout(net: NetworkSpec, x_in, params=None) -> List[np.ndarray]:
    x = np.asarray(x_in, dtype=float)
    if x.shape[0] != net.widths[0]:
        raise DimensionError(f"input has {x.shape[0]} rows, network expects {net.widths[0]}")
    xs = [x.copy()]
    for k, layer in enumerate(net.layers):
        x = layer.forward(x, _param(net, params, k))
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite state at node {k + 1}")
        xs.append(x)
    return xs


def adjoint_recursion(net: NetworkSpec, states, y, params=None) -> List[np.ndarray]:
    N = net.depth
    lams = [None] * (N + 1)
    lams[N] = net.loss.grad(states[N], y)
    for k in range(N - 1, -1, -1):
        layer = net.layers[k]
        th = _param(net, params, k)
        lams[k] = layer.vjp(states[k], lams[k + 1], th) + layer.penalty.grad_x(states[k], th)
        if not np.all(np.isfinite(lams[k])):
            raise NonFiniteError(f"non-finite costate at node {k}")
    return lams


def param_residual(layer, x_k, lam_k1, theta_k=None):
    """Stationarity residual ``grad_theta R_k + (grad_theta f_k)^T lam_{k+1}``."""
    theta_k = layer.theta if theta_k is None else theta_k
    return layer.penalty.grad_theta(x_k, theta_k) + layer.param_vjp(x_k, lam_k1, theta_k)


def backprop_oracle(net: NetworkSpec, x_in, y, params=None) -> OracleResult:
    """Sequential forward/backward sweep giving exact ``grad_theta J``."""
    xs = forward_rollout(net, x_in, params)
    lams = adjoint_recursion(net, xs, y, params)
    grads = [param_residual(layer, xs[k], lams[k + 1], _param(net, params, k))
             for k, layer in enumerate(net.layers)]
    loss = net.loss.value(xs[-1], y)
    J = loss + sum(layer.penalty.value(xs[k], _param(net, params, k))
                   for k, layer in enumerate(net.layers))
    return OracleResult(xs, lams, grads, loss, J)


def costate_residual(layer, x_k, lam_k, lam_k1, theta_k):
    """``lam_k - J_k^T lam_{k+1} - grad_x R_k`` at an interior node."""
    return lam_k - layer.vjp(x_k, lam_k1, theta_k) - layer.penalty.grad_x(x_k, theta_k)


def terminal_residual(loss, x_N, lam_N, y):
    return lam_N - loss.grad(x_N, y)


def node_residuals(net: NetworkSpec, x_nodes, lam_nodes, x_in, y, params=None) -> ResidualSet:
    N = net.depth
    if len(x_nodes) != N + 1 or len(lam_nodes) != N + 1:
        raise DimensionError(f"expected {N + 1} nodes, got {len(x_nodes)} / {len(lam_nodes)}")
    r_x = [np.asarray(x_nodes[0], dtype=float) - np.asarray(x_in, dtype=float)]
    for k in range(1, N + 1):
        r_x.append(x_nodes[k] - net.layers[k - 1].forward(x_nodes[k - 1], _param(net, params, k - 1)))
    r_lam = [costate_residual(net.layers[k], x_nodes[k], lam_nodes[k], lam_nodes[k + 1],
                              _param(net, params, k)) for k in range(N)]
    r_lam.append(terminal_residual(net.loss, x_nodes[N], lam_nodes[N], y))
    return ResidualSet(r_x, r_lam)


def wave_residuals(res: ResidualSet, thetas: Sequence[MetricFactor]):
    """``E_pm = (Theta r_x +- Theta^{-T} r_lam) / sqrt(2)`` per node."""
    E_plus, E_minus = [], []
    for rx, rl, th in zip(res.r_x, res.r_lam, thetas):
        ep, em = node_sources(rx, rl, th)
        E_plus.append(ep)
        E_minus.append(em)
    res.E_plus, res.E_minus = E_plus, E_minus
    return E_plus, E_minus


def node_sources(r_x, r_lam, theta: MetricFactor):
    a = theta.apply(r_x)
    b = theta.apply_inv_t(r_lam)
    return (a + b) / SQRT2, (a - b) / SQRT2


def inject_sources(field: WaveField, E_plus, E_minus, alpha) -> WaveField:
    """Forward-Euler source step ``w <- w_bar - alpha * E``."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha!r}")
    wp = [p - alpha * e for p, e in zip(field.w_plus, E_plus)]
    wm = [m - alpha * e for m, e in zip(field.w_minus, E_minus)]
    return WaveField(wp, wm, field.n)


def oracle_field(net: NetworkSpec, x_in, y, params=None, n=0) -> WaveField:
    """Wave field encoding the exact backprop states and costates."""
    from .grid import NodeState, nodes_to_field

    orc = backprop_oracle(net, _as_cols(x_in), _as_cols(y), params)
    return nodes_to_field(NodeState(orc.states, orc.costates), net.thetas, n)
