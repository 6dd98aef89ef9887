"""Synchronous worldsheet relaxation and training loops.

One solver step runs five phases in order:

A. transport waves one upwind step along depth,
B. reconstruct states and costates at every node,
C. compute node residuals and inject them as wave sources,
D. update every layer's parameters through its port,
E. re-impose the input clamp and the terminal loss gradient by scattering.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

from .boundaries import boundary_passivity_report, input_scatter, terminal_scatter
from .energy import source_work, wave_energy
from .grid import GridConfig, NodeState, WaveField, field_to_nodes, nodes_to_field
from .layers import _as_cols
from .pmp import (NetworkSpec, NonFiniteError, ResidualSet, backprop_oracle, forward_rollout,
                  inject_sources, node_residuals, param_residual, wave_residuals)
from .ports import (CurvaturePort, DiagonalPort, Impedance, InductivePort, ResistivePort,
                    reflection_norm)
from .transport import balanced_step, network_junctions, upwind_transport

log = logging.getLogger(__name__)

TRANSPORTS = ("balanced", "upwind")
OPTIMIZERS = ("resistive", "diagonal", "inductive", "curvature")
SCHEDULERS = ("lockstep", "round-robin", "random-fair")


class InstabilityError(RuntimeError):
    """Wave energy or loss grew beyond the divergence guard."""

    def __init__(self, message, step):
        super().__init__(f"{message} (step {step})")
        self.step = step


@dataclass
class TrainConfig:
    grid: GridConfig
    optimizer: str = "resistive"
    eta: float = 0.1
    R: float = 1.0
    L: float = 1.0
    diag_scales: Optional[list] = None
    hessians: Optional[list] = None
    transport: str = "balanced"
    identity_junctions: bool = True
    budget: int = 1000
    tol: Optional[float] = None
    seed: int = 0
    scheduler: str = "lockstep"
    log_every: int = 10
    update_every: int = 1
    batch_every: int = 1
    divergence_factor: float = 1e6
    record_wall_clock: bool = False

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.tol is not None and not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.transport not in TRANSPORTS:
            raise ValueError(f"transport must be one of {TRANSPORTS}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"scheduler must be one of {SCHEDULERS}")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.update_every < 1 or self.batch_every < 1 or self.log_every < 1:
            raise ValueError("update_every, batch_every and log_every must be >= 1")

    def updates_at(self, step: int) -> bool:
        """Whether parameters move at the end of solver step ``step`` (1-based)."""
        return step % self.update_every == 0

    def make_port(self, net: NetworkSpec):
        if self.optimizer == "resistive":
            return ResistivePort(self.eta)
        if self.optimizer == "diagonal":
            scales = self.diag_scales or [np.ones(layer.num_params) for layer in net.layers]
            return DiagonalPort(self.eta, scales)
        if self.optimizer == "inductive":
            return InductivePort(self.R, self.L, self.grid.dtau, net.depth,
                                 [layer.num_params for layer in net.layers])
        if self.hessians is None:
            raise ValueError("curvature optimizer needs per-layer hessians")
        return CurvaturePort(self.eta, self.hessians)

    def port_impedance(self, k, theta):
        """Impedance in per-unit-solver-time units, for reflection reporting."""
        s = self.grid.dtau / self.eta if self.eta > 0 else None
        if s is None:
            return None
        if self.optimizer == "resistive":
            return Impedance("resistive", value=s)
        if self.optimizer == "diagonal":
            scales = self.diag_scales[k] if self.diag_scales else np.ones_like(theta)
            return Impedance.diagonal(s * np.asarray(scales))
        if self.optimizer == "inductive":
            return Impedance("resistive", value=self.R)
        H = self.hessians[k]
        H = H(theta) if callable(H) else H
        return Impedance.full(s * np.atleast_2d(H))


METRIC_FIELDS = ("step", "loss", "rollout_loss", "max_rx", "max_rlam", "max_rtheta",
                 "energy", "input_margin", "terminal_margin", "source_work", "reflection",
                 "wall_clock")


@dataclass
class MetricsRow:
    step: int
    loss: float
    rollout_loss: float
    max_rx: float
    max_rlam: float
    max_rtheta: float
    energy: float
    input_margin: float
    terminal_margin: float
    source_work: float
    reflection: float
    wall_clock: Optional[float] = None

    @property
    def max_node(self) -> float:
        return max(self.max_rx, self.max_rlam)

    def as_dict(self):
        return asdict(self)

    def deterministic(self):
        d = asdict(self)
        d.pop("wall_clock")
        return d


@dataclass
class WaveState:
    field: WaveField
    params: List[np.ndarray]
    port: object
    n: int = 0

    def copy(self) -> "WaveState":
        import copy
        return WaveState(self.field.copy(), [p.copy() for p in self.params],
                         copy.deepcopy(self.port), self.n)

    def nodes(self, net) -> NodeState:
        return field_to_nodes(self.field, net.thetas)


def init_state(net: NetworkSpec, config: TrainConfig, batch_size: int = 1,
               field: Optional[WaveField] = None) -> WaveState:
    """Zero waves (or a supplied field) and the network's current parameters."""
    if field is None:
        field = WaveField.zeros(net.widths, batch_size)
    field.check_widths(net.widths)
    return WaveState(field, net.get_params(), config.make_port(net), field.n)


def _batch_cols(batch):
    x_in, y = batch
    return _as_cols(x_in), _as_cols(y)


@dataclass
class StepInfo:
    residuals: ResidualSet
    nodes: NodeState
    transported: WaveField


def transport_phase(state: WaveState, net: NetworkSpec, x_in, y, config: TrainConfig) -> WaveField:
    """Phase A.  Junction Jacobians are frozen at the current iterate."""
    pre = field_to_nodes(state.field, net.thetas)
    if config.transport == "upwind":
        junctions = network_junctions(net, pre.x, state.params, config.identity_junctions)
        return upwind_transport(state.field, config.grid, junctions)
    junctions = network_junctions(net, pre.x, state.params, identity_on_equal=False)
    res0 = node_residuals(net, pre.x, pre.lam, x_in, y, state.params)
    return balanced_step(state.field, config.grid, junctions, net.thetas, res0.r_x, res0.r_lam)


def sync_step(state: WaveState, net: NetworkSpec, batch, config: TrainConfig):
    """Advance the worldsheet by one solver step (phases A to E).

    Returns ``(new_state, info)``; ``state`` is not modified.
    """
    x_in, y = _batch_cols(batch)
    grid = config.grid
    N = net.depth
    # (A) transport
    wbar = transport_phase(state, net, x_in, y, config)
    # (B) reconstruct
    nodes = field_to_nodes(wbar, net.thetas)
    # (C) residuals and source injection
    res = node_residuals(net, nodes.x, nodes.lam, x_in, y, state.params)
    E_plus, E_minus = wave_residuals(res, net.thetas)
    new_field = inject_sources(wbar, E_plus, E_minus, grid.alpha)
    # (D) parameter update
    res.r_theta = [param_residual(layer, nodes.x[k], nodes.lam[k + 1], state.params[k])
                   for k, layer in enumerate(net.layers)]
    port = state.port
    params = state.params
    if config.updates_at(state.n + 1):
        params = []
        for k, r in enumerate(res.r_theta):
            new, _ = port.update(k, state.params[k], r)
            params.append(new)
    # (E) boundary scattering; the terminal gradient uses the pre-injection x_N
    new_field.w_plus[0] = input_scatter(new_field.w_minus[0], net.thetas[0], x_in)
    new_field.w_minus[N] = terminal_scatter(new_field.w_plus[N], net.thetas[N],
                                            net.loss.grad(nodes.x[N], y))
    new_field.n = state.n + 1
    if not new_field.is_finite() or not all(np.all(np.isfinite(p)) for p in params):
        raise NonFiniteError("non-finite wave field or parameters", step=state.n + 1)
    new_state = WaveState(new_field, params, port, state.n + 1)
    return new_state, StepInfo(res, nodes, wbar)


def make_row(state_before: WaveState, state_after: WaveState, info: StepInfo, net: NetworkSpec,
             batch, config: TrainConfig, t0=None) -> MetricsRow:
    x_in, y = _batch_cols(batch)
    res = info.residuals
    ports = boundary_passivity_report(state_after.field)
    reflection = 0.0
    for k, r in enumerate(res.r_theta):
        Z = config.port_impedance(k, state_before.params[k])
        if Z is None or r.size == 0:
            continue
        phi = (state_after.params[k] - state_before.params[k]) / config.grid.dtau
        reflection += reflection_norm(-r, phi, Z)
    rollout = net.objective(x_in, y, state_after.params)
    return MetricsRow(
        step=state_after.n,
        loss=float(net.loss.value(info.nodes.x[-1], y)),
        rollout_loss=float(rollout),
        max_rx=res.max_rx, max_rlam=res.max_rlam, max_rtheta=res.max_rtheta,
        energy=wave_energy(state_after.field, config.grid.dt),
        input_margin=ports.input_margin, terminal_margin=ports.terminal_margin,
        source_work=source_work(info.transported, res.E_plus, res.E_minus, config.grid.dt),
        reflection=reflection,
        wall_clock=(time.perf_counter() - t0) if (config.record_wall_clock and t0 is not None) else None)


class _Guard:
    """Divergence guard on wave energy relative to the first non-trivial value."""

    def __init__(self, factor):
        self.factor = factor
        self.ref = None

    def check(self, V, step):
        if not np.isfinite(V):
            raise InstabilityError("wave energy is not finite", step)
        if self.ref is None:
            if V > 0:
                self.ref = V
            return
        if V > self.factor * self.ref:
            raise InstabilityError(
                f"wave energy grew by more than {self.factor:g}x (V={V:.3g}, ref={self.ref:.3g})", step)


def current_residuals(state: WaveState, net: NetworkSpec, batch) -> ResidualSet:
    x_in, y = _batch_cols(batch)
    nodes = state.nodes(net)
    return node_residuals(net, nodes.x, nodes.lam, x_in, y, state.params)


def relax(state: WaveState, net: NetworkSpec, batch, config: TrainConfig,
          callback: Optional[Callable] = None):
    """Run :func:`sync_step` until the residual tolerance or the step budget.

    Returns ``(state, metrics)`` with one :class:`MetricsRow` per step.
    Raises :class:`InstabilityError` when the energy guard trips.
    """
    metrics: List[MetricsRow] = []
    if config.tol is not None and current_residuals(state, net, batch).max_node <= config.tol:
        return state, metrics
    guard = _Guard(config.divergence_factor)
    t0 = time.perf_counter()
    for _ in range(config.budget):
        new_state, info = sync_step(state, net, batch, config)
        row = make_row(state, new_state, info, net, batch, config, t0)
        metrics.append(row)
        if callback is not None:
            callback(new_state, row)
        state = new_state
        guard.check(row.energy, state.n)
        if config.tol is not None and row.max_node <= config.tol:
            break
    return state, metrics


def train(net: NetworkSpec, dataset, config: TrainConfig, state: Optional[WaveState] = None,
          callback: Optional[Callable] = None):
    """Train ``net`` on ``dataset`` with the wave relaxation.

    ``dataset`` is a sequence of ``(x_in, y)`` batches; the active batch
    rotates every ``config.batch_every`` steps while the waves keep running.
    The trained parameters are written back into ``net``.  Returns
    ``(state, metrics)`` where ``metrics`` holds every ``log_every``-th row
    and the final one.
    """
    batches = [_batch_cols(b) for b in dataset]
    if not batches:
        raise ValueError("dataset is empty")
    sizes = {b[0].shape[1] for b in batches}
    if len(sizes) != 1:
        raise ValueError("all batches must have the same size (waves carry the batch axis)")
    if state is None:
        state = init_state(net, config, batch_size=sizes.pop())
    guard = _Guard(config.divergence_factor)
    loss_guard = _Guard(config.divergence_factor)
    metrics: List[MetricsRow] = []
    t0 = time.perf_counter()
    for i in range(config.budget):
        batch = batches[(i // config.batch_every) % len(batches)]
        new_state, info = sync_step(state, net, batch, config)
        last = i == config.budget - 1
        log_now = last or new_state.n % config.log_every == 0
        converged = (config.tol is not None and info.residuals.max_node <= config.tol
                     and info.residuals.max_rtheta <= config.tol)
        if log_now or converged:
            row = make_row(state, new_state, info, net, batch, config, t0)
            metrics.append(row)
            loss_guard.check(row.rollout_loss, new_state.n)
            if callback is not None:
                callback(new_state, row)
        state = new_state
        guard.check(wave_energy(state.field, config.grid.dt), state.n)
        if converged:
            break
    net.set_params(state.params)
    return state, metrics


def sgd_baseline(net: NetworkSpec, dataset, eta: float, steps: int, batch_every: int = 1):
    """Plain backprop gradient descent with the same batch schedule.

    Returns ``(params, losses)``; ``net`` is left unchanged.
    """
    batches = [_batch_cols(b) for b in dataset]
    params = net.get_params()
    losses = []
    for i in range(steps):
        x_in, y = batches[(i // batch_every) % len(batches)]
        orc = backprop_oracle(net, x_in, y, params)
        params = [p - eta * g for p, g in zip(params, orc.grads)]
        losses.append(net.objective(x_in, y, params))
    return params, losses


def gradient_alignment(net: NetworkSpec, state: WaveState, batch) -> float:
    """Cosine between the wave parameter residual and the exact gradient."""
    x_in, y = _batch_cols(batch)
    nodes = state.nodes(net)
    r = np.concatenate([param_residual(layer, nodes.x[k], nodes.lam[k + 1], state.params[k])
                        for k, layer in enumerate(net.layers)])
    g = np.concatenate(backprop_oracle(net, x_in, y, state.params).grads)
    nr, ng = np.linalg.norm(r), np.linalg.norm(g)
    if nr == 0 or ng == 0:
        return 1.0 if nr == ng else 0.0
    return float(np.dot(r, g) / (nr * ng))
