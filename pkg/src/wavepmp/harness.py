"""Asynchronous per-layer workers with nearest-neighbor message passing.

Worker ``k`` owns the waves at node ``k`` and, for ``k < N``, the parameters
and port state of layer ``k``.  Workers never see each other; they only
receive messages from ``k - 1`` and ``k + 1`` through the harness, which
rejects anything else.

One tick is one communication round.  A solver step needs information from
two nodes away (three for balanced transport), so a step spans two (three)
phases; each phase consumes at most one message per neighbor and emits at
most one message per neighbor.  Messages are tagged with the phase that
consumes them and a worker always reads the latest message carrying its
current tag, which under the random-fair scheduler may be stale or ahead.

Schedulers:

* ``lockstep``: every worker runs each tick; delivery at the end of the tick.
* ``round-robin``: every worker runs each tick in order ``0..N`` with
  immediate delivery.  Tags keep this equivalent to lockstep.
* ``random-fair``: each worker runs with probability 1/2 per tick, forced
  after ``max_skip`` idle ticks, in a seeded random order, immediate delivery.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .boundaries import input_scatter, terminal_scatter
from .grid import SQRT2, NodeState, WaveField, inverse_wave_transform
from .layers import _as_cols
from .pmp import (NetworkSpec, NonFiniteError, ResidualSet, costate_residual, node_sources,
                  param_residual, terminal_residual)
from .ports import InductivePort
from .trainer import (InstabilityError, StepInfo, TrainConfig, WaveState, _Guard,
                      current_residuals, init_state, make_row)
from .transport import (backward_defect, blend, damping_factor, defect_from_incoming, hold,
                        layer_junction, relax_node)


class LocalityError(RuntimeError):
    """A worker tried to talk to a non-adjacent worker or exceeded its message quota."""


class DeadlockError(RuntimeError):
    """No worker could make progress within the tick timeout."""


@dataclass
class Message:
    offset: int       # -1 to the left neighbor, +1 to the right neighbor
    tag: int          # phase that consumes it
    payload: object


@dataclass
class HarnessTrace:
    ticks: int = 0
    messages: List[np.ndarray] = field(default_factory=list)   # per tick, per worker
    param_changes: Dict[int, List[int]] = field(default_factory=dict)
    step_done: Dict[int, List[int]] = field(default_factory=dict)

    @property
    def max_messages(self) -> int:
        return int(max((m.max() for m in self.messages), default=0))


class LayerWorker:
    """Owner of node ``k`` (and layer ``k`` when ``k < N``)."""

    def __init__(self, k, net: NetworkSpec, state: WaveState, config: TrainConfig, x_in, y, port):
        self.k = k
        self.N = net.depth
        self.config = config
        self.grid = config.grid
        self.d = damping_factor(config.grid)
        self.balanced = config.transport == "balanced"
        self.num_phases = 3 if self.balanced else 2
        self.theta_m = net.thetas[k]
        self.theta_next = net.thetas[k + 1] if k < self.N else None
        self.layer = net.layers[k] if k < self.N else None
        self.params = state.params[k].copy() if k < self.N else None
        self.port = port
        self.loss = net.loss if k == self.N else None
        self.x_in = x_in if k == 0 else None
        self.y = y if k == self.N else None
        self.w_p = state.field.w_plus[k].copy()
        self.w_m = state.field.w_minus[k].copy()
        self.n = state.n
        self.stop_at = state.n + config.budget
        self.phase = 0
        self.mailbox: Dict[tuple, object] = {}
        self.history: Dict[int, dict] = {}
        self._scratch: dict = {}

    # --- messaging -----------------------------------------------------------

    def receive(self, from_offset, tag, payload):
        self.mailbox[(from_offset, tag)] = payload

    def _need(self, from_offset, tag):
        return (from_offset, tag) in self.mailbox

    def _ready(self) -> bool:
        k, N, p = self.k, self.N, self.phase
        need = []
        if p == 0:
            need = [(-1, 0)] * (k > 0) + [(1, 0)] * (k < N)
        elif self.balanced and p == 1:
            need = [(-1, 1)] * (k > 0)
        else:
            tag = self.num_phases - 1
            need = [(-1, tag)] * (k > 0) + [(1, tag)] * (k < N)
        return all(self._need(*n) for n in need)

    def _junction(self, x):
        ident = self.config.identity_junctions and not self.balanced
        return layer_junction(self.k, self.layer, self.theta_m, self.theta_next, x, self.params, ident)

    def initial_messages(self) -> List[Message]:
        """Phase-0 messages computed from the current (post-step) node state."""
        k, N = self.k, self.N
        out = []
        x, lam = inverse_wave_transform(self.w_p, self.w_m, self.theta_m)
        s = self._scratch = {"x": x, "lam": lam}
        if k < N:
            s["J"] = self._junction(x)
        if self.balanced:
            if k < N:
                s["fx"] = self.layer.forward(x, self.params)
                out.append(Message(+1, 0, s["fx"]))
            if k > 0:
                out.append(Message(-1, 0, (x, lam)))
        else:
            if k < N:
                out.append(Message(+1, 0, s["J"].forward(self.w_p)))
            if k > 0:
                out.append(Message(-1, 0, self.w_m))
        return out

    # --- phases --------------------------------------------------------------

    def activate(self) -> Optional[List[Message]]:
        """Run the current phase; ``None`` when waiting on a first message."""
        if self.n >= self.stop_at or not self._ready():
            return None
        if self.phase == 0:
            out = self._balanced_a() if self.balanced else self._upwind_a()
        elif self.balanced and self.phase == 1:
            out = self._balanced_b()
        else:
            return self._finish()
        self.phase += 1
        return out

    def _upwind_a(self):
        k, N, s, nu, d = self.k, self.N, self._scratch, self.grid.nu, self.d
        wbar_p = hold(self.w_p, d) if k == 0 else blend(self.w_p, self.mailbox[(-1, 0)], nu, d)
        if k == N:
            wbar_m = hold(self.w_m, d)
        else:
            wbar_m = blend(self.w_m, s["J"].backward(self.mailbox[(1, 0)]), nu, d)
        return self._reconstruct(wbar_p, wbar_m)

    def _reconstruct(self, wbar_p, wbar_m):
        s = self._scratch
        s["wbar_p"], s["wbar_m"] = wbar_p, wbar_m
        xb, lb = inverse_wave_transform(wbar_p, wbar_m, self.theta_m)
        s["xb"], s["lb"] = xb, lb
        out = []
        tag = self.num_phases - 1
        if self.k < self.N:
            out.append(Message(+1, tag, self.layer.forward(xb, self.params)))
        if self.k > 0:
            out.append(Message(-1, tag, lb))
        return out

    def _balanced_a(self):
        k, N, s, nu, d = self.k, self.N, self._scratch, self.grid.nu, self.d
        x, lam = s["x"], s["lam"]
        if k == 0:
            s["r_x"] = np.asarray(x, dtype=float) - np.asarray(self.x_in, dtype=float)
        else:
            s["r_x"] = x - self.mailbox[(-1, 0)]
        out = []
        if k < N:
            x_next, lam_next = self.mailbox[(1, 0)]
            r_lam = costate_residual(self.layer, x, lam, lam_next, self.params)
            r_x_next = x_next - s["fx"]
            D = backward_defect(self.theta_m, self.theta_next, s["J"], r_x_next, r_lam)
            s["wbar_m"] = relax_node(self.w_m, D, nu, d)
            out.append(Message(+1, 1, s["J"].forward(self.theta_m.apply_inv_t(r_lam))))
        else:
            s["wbar_m"] = hold(self.w_m, d)
        return out

    def _balanced_b(self):
        k, s = self.k, self._scratch
        if k == 0:
            wbar_p = hold(self.w_p, self.d)
        else:
            D = defect_from_incoming(self.theta_m, s["r_x"], self.mailbox[(-1, 1)])
            wbar_p = relax_node(self.w_p, D, self.grid.nu, self.d)
        return self._reconstruct(wbar_p, s["wbar_m"])

    def _finish(self):
        k, N, s = self.k, self.N, self._scratch
        tag = self.num_phases - 1
        xb, lb = s["xb"], s["lb"]
        if k == 0:
            r_x = np.asarray(xb, dtype=float) - np.asarray(self.x_in, dtype=float)
        else:
            r_x = xb - self.mailbox[(-1, tag)]
        if k < N:
            lam_next = self.mailbox[(1, tag)]
            r_lam = costate_residual(self.layer, xb, lb, lam_next, self.params)
        else:
            r_lam = terminal_residual(self.loss, xb, lb, self.y)
        ep, em = node_sources(r_x, r_lam, self.theta_m)
        alpha = self.grid.alpha
        new_p = s["wbar_p"] - alpha * ep
        new_m = s["wbar_m"] - alpha * em
        params_before = self.params
        r_theta = None
        if k < N:
            r_theta = param_residual(self.layer, xb, lam_next, self.params)
            if self.config.updates_at(self.n + 1):
                self.params, _ = self.port.update(k, self.params, r_theta)
        if k == 0:
            new_p = input_scatter(new_m, self.theta_m, self.x_in)
        if k == N:
            new_m = terminal_scatter(new_p, self.theta_m, self.loss.grad(xb, self.y))
        if not (np.all(np.isfinite(new_p)) and np.all(np.isfinite(new_m))
                and (self.params is None or np.all(np.isfinite(self.params)))):
            raise NonFiniteError(f"worker {k}: non-finite waves or parameters", step=self.n + 1)
        self.w_p, self.w_m = new_p, new_m
        self.n += 1
        self.phase = 0
        self.history[self.n] = {
            "w_p": new_p, "w_m": new_m, "params": self.params, "params_before": params_before,
            "r_x": r_x, "r_lam": r_lam, "r_theta": r_theta, "E_plus": ep, "E_minus": em,
            "xb": xb, "lb": lb, "wbar_p": s["wbar_p"], "wbar_m": s["wbar_m"],
            "velocity": (self.port.velocity[k].copy()
                         if isinstance(self.port, InductivePort) and k < N else None),
        }
        return self.initial_messages()


class Harness:
    """Delivers messages between adjacent workers under a scheduler."""

    def __init__(self, workers: List[LayerWorker], scheduler="lockstep", seed=0, max_skip=3,
                 trace: Optional[HarnessTrace] = None):
        self.workers = workers
        self.scheduler = scheduler
        self.rng = np.random.default_rng(seed)
        self.max_skip = max_skip
        self.skipped = np.zeros(len(workers), dtype=int)
        self.trace = trace if trace is not None else HarnessTrace()
        self.tick = 0
        self._pending: List[tuple] = []
        for w in workers:
            self._post(w.k, w.initial_messages(), immediate=True)

    def _post(self, k, messages, immediate, counts=None):
        seen = set()
        for m in messages:
            if m.offset not in (-1, 1):
                raise LocalityError(f"worker {k} addressed offset {m.offset}; only neighbors allowed")
            dest = k + m.offset
            if not 0 <= dest < len(self.workers):
                raise LocalityError(f"worker {k} addressed missing worker {dest}")
            if m.offset in seen:
                raise LocalityError(f"worker {k} sent two messages to neighbor {dest} in one tick")
            seen.add(m.offset)
            if counts is not None:
                counts[k] += 1
            if immediate:
                self.workers[dest].receive(-m.offset, m.tag, m.payload)
            else:
                self._pending.append((dest, -m.offset, m.tag, m.payload))

    def _order(self):
        n = len(self.workers)
        if self.scheduler in ("lockstep", "round-robin"):
            return list(range(n))
        active = (self.rng.random(n) < 0.5) | (self.skipped >= self.max_skip)
        self.skipped = np.where(active, 0, self.skipped + 1)
        order = self.rng.permutation(n)
        return [int(i) for i in order if active[i]]

    def step(self) -> bool:
        """Run one tick; returns whether any worker made progress."""
        self.tick += 1
        counts = np.zeros(len(self.workers), dtype=int)
        immediate = self.scheduler != "lockstep"
        progressed = False
        for i in self._order():
            w = self.workers[i]
            before = None if w.params is None else w.params
            out = w.activate()
            if out is None:
                continue
            progressed = True
            if w.params is not before:
                if not np.array_equal(w.params, before):
                    self.trace.param_changes.setdefault(i, []).append(self.tick)
            if w.phase == 0:
                self.trace.step_done.setdefault(i, []).append(self.tick)
            self._post(i, out, immediate, counts)
        for dest, frm, tag, payload in self._pending:
            self.workers[dest].receive(frm, tag, payload)
        self._pending = []
        self.trace.ticks = self.tick
        self.trace.messages.append(counts)
        return progressed


def _assemble(workers: List[LayerWorker], n: int, net: NetworkSpec, template_port):
    recs = [w.history[n] for w in workers]
    N = net.depth
    fld = WaveField([r["w_p"] for r in recs], [r["w_m"] for r in recs], n)
    wbar = WaveField([r["wbar_p"] for r in recs], [r["wbar_m"] for r in recs], n - 1)
    res = ResidualSet([r["r_x"] for r in recs], [r["r_lam"] for r in recs],
                      [recs[k]["r_theta"] for k in range(N)],
                      [r["E_plus"] for r in recs], [r["E_minus"] for r in recs])
    info = StepInfo(res, NodeState([r["xb"] for r in recs], [r["lb"] for r in recs]), wbar)
    port = copy.deepcopy(template_port)
    if isinstance(port, InductivePort):
        for k in range(N):
            port.velocity[k] = recs[k]["velocity"]
    after = WaveState(fld, [recs[k]["params"] for k in range(N)], port, n)
    before = WaveState(fld, [recs[k]["params_before"] for k in range(N)], port, n - 1)
    return before, after, info


def async_run(net: NetworkSpec, batch, config: TrainConfig, state: Optional[WaveState] = None,
              trace: Optional[HarnessTrace] = None, timeout: int = 64, max_ticks: Optional[int] = None):
    """Run the relaxation as one worker per node under ``config.scheduler``.

    Returns ``(state, metrics)`` like :func:`relax`: one row per solver step
    completed by every worker.  Pass a :class:`HarnessTrace` to record
    per-tick message counts and parameter-change ticks.
    """
    x_in, y = _as_cols(batch[0]), _as_cols(batch[1])
    if state is None:
        state = init_state(net, config, batch_size=x_in.shape[1])
    metrics = []
    if config.tol is not None and current_residuals(state, net, (x_in, y)).max_node <= config.tol:
        return state, metrics
    workers = [LayerWorker(k, net, state, config, x_in, y, copy.deepcopy(state.port))
               for k in range(net.depth + 1)]
    harness = Harness(workers, config.scheduler, config.seed, trace=trace)
    guard = _Guard(config.divergence_factor)
    phases = workers[0].num_phases
    if max_ticks is None:
        max_ticks = 20 * phases * config.budget + 10 * timeout
    idle = 0
    next_row = state.n + 1
    target = state.n + config.budget
    while next_row <= target:
        if harness.tick >= max_ticks:
            raise DeadlockError(f"tick limit {max_ticks} reached before step {next_row}")
        if harness.step():
            idle = 0
        else:
            idle += 1
            if idle > timeout:
                raise DeadlockError(f"no progress for {timeout} ticks (waiting at step {next_row})")
        while next_row <= target and all(next_row in w.history for w in workers):
            before, after, info = _assemble(workers, next_row, net, state.port)
            row = make_row(before, after, info, net, (x_in, y), config)
            metrics.append(row)
            state = after
            for w in workers:
                for n in [n for n in w.history if n < next_row]:
                    del w.history[n]
            guard.check(row.energy, state.n)
            next_row += 1
            if config.tol is not None and row.max_node <= config.tol:
                target = next_row - 1
    return state, metrics
