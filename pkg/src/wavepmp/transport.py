"""Upwind transport of waves along depth, with junctions at every link.

Two transport rules are provided:

* :func:`upwind_step_forward` / :func:`upwind_step_backward` -- first-order
  upwind blending ``(1 - nu) w_k + nu * T w_{k-1}``.  At ``nu = 1`` this is a
  pure shift through the junction.
* :func:`balanced_step` -- the same upwind difference, but written in terms of
  the node residuals so that a field solving the discrete optimality
  conditions is left unchanged.  For identity layers the two rules coincide.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .grid import SQRT2, DimensionError, GridConfig, MetricFactor, WaveField


@dataclass
class JunctionOperator:
    """Link ``k -> k+1`` transformer ``T_k = Theta_{k+1} J_k Theta_k^{-1}``."""

    k: int
    in_dim: int
    out_dim: int
    apply: Callable[[np.ndarray], np.ndarray]
    apply_t: Callable[[np.ndarray], np.ndarray]
    is_identity: bool = False

    def forward(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.in_dim:
            raise DimensionError(f"junction {self.k}: expected {self.in_dim} rows, got {v.shape}")
        if self.is_identity:
            return v.copy()
        return self.apply(v)

    def backward(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape[0] != self.out_dim:
            raise DimensionError(f"junction {self.k}: expected {self.out_dim} rows, got {u.shape}")
        if self.is_identity:
            return u.copy()
        return self.apply_t(u)

    def dense(self):
        """Materialize ``T_k`` (test oracle only)."""
        return np.column_stack([self.forward(e) for e in np.eye(self.in_dim)])


def identity_junction(k, n) -> JunctionOperator:
    return JunctionOperator(k, n, n, lambda v: v.copy(), lambda u: u.copy(), True)


def make_junction(k, theta_k: MetricFactor, theta_k1: MetricFactor,
                  jvp=None, vjp=None, identity=False) -> JunctionOperator:
    """Wire a junction from the layer's Jacobian-vector handles.

    ``jvp(v) = J_k v`` and ``vjp(u) = J_k^T u``.  With ``identity=True`` (only
    for equal widths) the link is a plain copy.
    """
    if identity:
        if theta_k.n != theta_k1.n:
            raise DimensionError(f"identity junction needs equal widths, got {theta_k.n} -> {theta_k1.n}")
        return identity_junction(k, theta_k.n)
    if jvp is None or vjp is None:
        raise ValueError("non-identity junction needs jvp and vjp handles")

    def apply(v):
        return theta_k1.apply(jvp(theta_k.apply_inv(v)))

    def apply_t(u):
        return theta_k.apply_inv_t(vjp(theta_k1.apply_t(u)))

    return JunctionOperator(k, theta_k.n, theta_k1.n, apply, apply_t, False)


def layer_junction(k, layer, theta_k: MetricFactor, theta_k1: MetricFactor, x_k, th,
                   identity_on_equal=True) -> JunctionOperator:
    """Junction of link ``k`` with the layer Jacobian frozen at ``x_k``."""
    if identity_on_equal and layer.in_dim == layer.out_dim:
        return identity_junction(k, layer.in_dim)
    return make_junction(k, theta_k, theta_k1,
                         jvp=lambda v: layer.jvp(x_k, v, th),
                         vjp=lambda u: layer.vjp(x_k, u, th))


def network_junctions(net, x_nodes, params=None, identity_on_equal=True) -> List[JunctionOperator]:
    """Junctions for every link, Jacobians frozen at the given node states."""
    return [layer_junction(k, layer, net.thetas[k], net.thetas[k + 1], x_nodes[k],
                           layer.theta if params is None else params[k], identity_on_equal)
            for k, layer in enumerate(net.layers)]


def _check_nu(nu):
    if not nu > 0:
        raise ValueError(f"Courant number must be positive, got {nu!r}")


def blend(own, incoming, nu, damping=1.0):
    """One node of the upwind update.  ``nu == 1`` is an exact copy."""
    if nu == 1.0:
        out = incoming.copy()
    else:
        out = (1.0 - nu) * own + nu * incoming
    if damping != 1.0:
        out = damping * out
    return out


def hold(w, damping=1.0):
    """Boundary entries are carried over (only damped)."""
    return w.copy() if damping == 1.0 else damping * w


def damping_factor(grid: GridConfig):
    return 1.0 - grid.gamma * grid.dtau if grid.gamma else 1.0


def upwind_step_forward(field: WaveField, grid: GridConfig,
                        junctions: Sequence[JunctionOperator]) -> List[np.ndarray]:
    nu = grid.nu
    _check_nu(nu)
    N = field.num_nodes - 1
    if len(junctions) != N:
        raise DimensionError(f"need {N} junctions, got {len(junctions)}")
    d = damping_factor(grid)
    out = [hold(field.w_plus[0], d)]
    for k in range(1, N + 1):
        incoming = junctions[k - 1].forward(field.w_plus[k - 1])
        if incoming.shape != field.w_plus[k].shape:
            raise DimensionError(f"junction {k - 1} output {incoming.shape} != node {k} {field.w_plus[k].shape}")
        out.append(blend(field.w_plus[k], incoming, nu, d))
    return out


def upwind_step_backward(field: WaveField, grid: GridConfig,
                         junctions: Sequence[JunctionOperator]) -> List[np.ndarray]:
    nu = grid.nu
    _check_nu(nu)
    N = field.num_nodes - 1
    if len(junctions) != N:
        raise DimensionError(f"need {N} junctions, got {len(junctions)}")
    d = damping_factor(grid)
    out = [None] * (N + 1)
    out[N] = hold(field.w_minus[N], d)
    for k in range(N - 1, -1, -1):
        incoming = junctions[k].backward(field.w_minus[k + 1])
        if incoming.shape != field.w_minus[k].shape:
            raise DimensionError(f"junction {k} output {incoming.shape} != node {k} {field.w_minus[k].shape}")
        out[k] = blend(field.w_minus[k], incoming, nu, d)
    return out


def upwind_transport(field: WaveField, grid: GridConfig, junctions) -> WaveField:
    return WaveField(upwind_step_forward(field, grid, junctions),
                     upwind_step_backward(field, grid, junctions), field.n)


# --- residual-form (balanced) transport --------------------------------------


def forward_defect(theta_k: MetricFactor, theta_km1: MetricFactor, junction: JunctionOperator,
                   r_x_k, r_lam_km1):
    """Upwind difference of ``w_plus`` at node ``k`` in residual form."""
    inc = junction.forward(theta_km1.apply_inv_t(r_lam_km1))
    return defect_from_incoming(theta_k, r_x_k, inc)


def defect_from_incoming(theta_k: MetricFactor, r_x_k, incoming):
    """Finish :func:`forward_defect` given the upstream contribution."""
    return (theta_k.apply(r_x_k) - incoming) / SQRT2


def backward_defect(theta_k: MetricFactor, theta_kp1: MetricFactor, junction: JunctionOperator,
                    r_x_kp1, r_lam_k):
    """Upwind difference of ``w_minus`` at node ``k`` in residual form."""
    inc = junction.backward(theta_kp1.apply(r_x_kp1))
    return (-inc - theta_k.apply_inv_t(r_lam_k)) / SQRT2


def relax_node(own, defect, nu, damping=1.0):
    out = own - nu * defect
    if damping != 1.0:
        out = damping * out
    return out


def balanced_step(field: WaveField, grid: GridConfig, junctions: Sequence[JunctionOperator],
                  thetas: Sequence[MetricFactor], r_x, r_lam) -> WaveField:
    """Transport ``w_k <- w_k - nu * D_k`` with residual-form upwind differences.

    ``r_x``/``r_lam`` are the node residuals of ``field`` itself.  The boundary
    entries ``w_plus[0]`` and ``w_minus[N]`` are carried over unchanged.
    """
    nu = grid.nu
    _check_nu(nu)
    N = field.num_nodes - 1
    d = damping_factor(grid)
    wp = [hold(field.w_plus[0], d)]
    for k in range(1, N + 1):
        D = forward_defect(thetas[k], thetas[k - 1], junctions[k - 1], r_x[k], r_lam[k - 1])
        wp.append(relax_node(field.w_plus[k], D, nu, d))
    wm = [None] * (N + 1)
    wm[N] = hold(field.w_minus[N], d)
    for k in range(N - 1, -1, -1):
        D = backward_defect(thetas[k], thetas[k + 1], junctions[k], r_x[k + 1], r_lam[k])
        wm[k] = relax_node(field.w_minus[k], D, nu, d)
    return WaveField(wp, wm, field.n)
