"""Invariant and acceptance suites shared by the CLI and the test-suite."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from .boundaries import input_scatter, terminal_scatter
from .control import control_hessians, controls_of, euler_layerize, lqr_riccati_oracle, scalar_lqr
from .energy import energy_balance_report, passivity_monitor, wave_energy
from .grid import (GridConfig, MetricFactor, WaveField, field_to_nodes, inverse_wave_transform,
                   power_split, wave_transform)
from .harness import HarnessTrace, async_run
from .layers import AffineLayer, SquaredLoss
from .models import dataset_xor, make_mlp
from .pmp import NetworkSpec, backprop_oracle, param_residual
from .ports import matched_flow, port_scatter, reflection_norm, step_curvature
from .trainer import TrainConfig, init_state, relax, sgd_baseline, sync_step, train
from .transport import identity_junction, upwind_transport


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(name, limit=None):
    def deco(fn):
        def run(**kw) -> CheckResult:
            t0 = time.perf_counter()
            passed, detail = fn(**kw)
            dt = time.perf_counter() - t0
            if limit is not None and dt > limit:
                passed = False
                detail += f"; runtime {dt:.1f}s exceeds {limit}s"
            return CheckResult(name, bool(passed), detail, dt)
        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run
    return deco


def random_metric(rng, n, spread=0.5):
    """Well-conditioned random factor ``Q diag(s)`` with ``s`` in ``[1-spread, 1+spread]``."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return MetricFactor(Q * rng.uniform(1 - spread, 1 + spread, n))


def linear_net(N, n=3, seed=0, scale=0.2):
    """Linear layers ``x -> (I + A) x + b`` with a squared loss."""
    rng = np.random.default_rng(seed)
    layers = [AffineLayer(np.eye(n) + scale * rng.uniform(-1, 1, (n, n)) / np.sqrt(n),
                          0.1 * rng.uniform(-1, 1, n)) for _ in range(N)]
    return NetworkSpec(layers, SquaredLoss())


# --- 1 ---------------------------------------------------------------------------


@_timed("wave round trip and power identity", limit=5.0)
def check_roundtrip(instances=1000, max_dim=64, tol=1e-12, seed=0):
    rng = np.random.default_rng(seed)
    worst_rt = worst_pw = 0.0
    for _ in range(instances):
        n = int(rng.integers(1, max_dim + 1))
        th = random_metric(rng, n)
        x, lam = rng.standard_normal(n), rng.standard_normal(n)
        wp, wm = wave_transform(x, lam, th)
        x2, lam2 = inverse_wave_transform(wp, wm, th)
        worst_rt = max(worst_rt, np.abs(x2 - x).max(), np.abs(lam2 - lam).max())
        worst_pw = max(worst_pw, abs(power_split(wp, wm) - float(lam @ x)) / max(1.0, abs(float(lam @ x))))
    return max(worst_rt, worst_pw) <= tol, f"max round-trip err {worst_rt:.1e}, power err {worst_pw:.1e} (tol {tol:g})"


# --- 2 ---------------------------------------------------------------------------


@_timed("pure shift at nu=1")
def check_pure_shift(fields=100, N=64, seed=0):
    rng = np.random.default_rng(seed)
    grid = GridConfig.from_courant(N + 1, 1.0)
    bad = 0
    for _ in range(fields):
        n, B = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        wf = WaveField([rng.standard_normal((n, B)) for _ in range(N + 1)],
                       [rng.standard_normal((n, B)) for _ in range(N + 1)])
        out = upwind_transport(wf, grid, [identity_junction(k, n) for k in range(N)])
        ok = (all(np.array_equal(out.w_plus[k], wf.w_plus[k - 1]) for k in range(1, N + 1))
              and all(np.array_equal(out.w_minus[k], wf.w_minus[k + 1]) for k in range(N))
              and np.array_equal(out.w_plus[0], wf.w_plus[0])
              and np.array_equal(out.w_minus[N], wf.w_minus[N]))
        bad += not ok
    return bad == 0, f"{fields - bad}/{fields} fields shifted bit-exactly (N={N})"


# --- 3 ---------------------------------------------------------------------------


@_timed("boundary clamp exactness")
def check_boundary_clamp(steps=1000, tol=1e-12, seed=0):
    net = make_mlp([2, 3, 3, 1], "tanh", seed)
    X, Y = dataset_xor()
    cfg = TrainConfig(GridConfig.from_courant(net.depth + 1, 0.5, alpha=1.0), eta=0.05, budget=steps)
    state = init_state(net, cfg, batch_size=X.shape[1])
    N = net.depth
    worst = 0.0
    for _ in range(steps):
        state, info = sync_step(state, net, (X, Y), cfg)
        x0, _ = inverse_wave_transform(state.field.w_plus[0], state.field.w_minus[0], net.thetas[0])
        _, lamN = inverse_wave_transform(state.field.w_plus[N], state.field.w_minus[N], net.thetas[N])
        g = net.loss.grad(info.nodes.x[N], Y)
        worst = max(worst, np.abs(x0 - X).max(), np.abs(lamN - g).max())
    return worst <= tol, f"max clamp error {worst:.1e} over {steps} steps (tol {tol:g})"


# --- 4 ---------------------------------------------------------------------------


def fd_gradient(net, X, Y, params, eps=1e-6):
    grads = []
    for k, th in enumerate(params):
        g = np.zeros_like(th)
        for i in range(th.size):
            p_hi = [p.copy() for p in params]
            p_lo = [p.copy() for p in params]
            p_hi[k][i] += eps
            p_lo[k][i] -= eps
            g[i] = (net.objective(X, Y, p_hi) - net.objective(X, Y, p_lo)) / (2 * eps)
        grads.append(g)
    return grads


@_timed("gradient oracle vs finite differences", limit=30.0)
def check_gradient_oracle(nets=20, tol=1e-5, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(nets):
        depth = int(rng.integers(1, 7))
        widths = [int(w) for w in rng.integers(1, 9, size=depth + 1)]
        net = make_mlp(widths, "tanh", seed=int(rng.integers(1 << 30)))
        X = rng.standard_normal((widths[0], 3))
        Y = rng.standard_normal((widths[-1], 3))
        params = net.get_params()
        orc = backprop_oracle(net, X, Y, params)
        r = np.concatenate([param_residual(layer, orc.states[k], orc.costates[k + 1], params[k])
                            for k, layer in enumerate(net.layers)])
        fd = np.concatenate(fd_gradient(net, X, Y, params))
        worst = max(worst, np.linalg.norm(r - fd) / max(np.linalg.norm(fd), 1e-12))
    return worst <= tol, f"max relative error {worst:.1e} over {nets} MLPs (tol {tol:g})"


# --- 5 ---------------------------------------------------------------------------


@_timed("frozen-parameter relaxation at nu=1", limit=60.0)
def check_relaxation(depths=(4, 16, 32), nu=1.0, alpha=0.5, tol=1e-8, match=1e-6, transport="balanced"):
    x = np.array([0.5, -0.2, 0.1])
    y = np.array([0.3, 0.3, 0.0])
    parts, ok = [], True
    for N in depths:
        net = linear_net(N)
        cfg = TrainConfig(GridConfig.from_courant(N + 1, nu, alpha=alpha), eta=0.0,
                          transport=transport, budget=10 * N, tol=tol)
        try:
            state, rows = relax(init_state(net, cfg), net, (x, y), cfg)
        except RuntimeError as exc:
            ok = False
            parts.append(f"N={N}: {exc}")
            continue
        orc = backprop_oracle(net, x[:, None], y[:, None])
        nodes = field_to_nodes(state.field, net.thetas)
        err = max(max(np.abs(a - b).max() for a, b in zip(nodes.x, orc.states)),
                  max(np.abs(a - b).max() for a, b in zip(nodes.lam, orc.costates)))
        res = rows[-1].max_node if rows else 0.0
        ok &= res <= tol and err <= match
        parts.append(f"N={N}: residual {res:.1e} after {len(rows)} steps, oracle err {err:.1e}")
    return ok, "; ".join(parts)


# --- 6 ---------------------------------------------------------------------------


def passive_run(field, grid, steps, port="reflect", quadrature="trapezoid"):
    """Source-free transport between passive ports; returns the energy history.

    ``reflect`` applies the lossless scattering ports with ``x_in = 0`` and a
    zero loss gradient; ``absorb`` sets the incoming waves to zero.
    """
    N = field.num_nodes - 1
    n = field.widths[0]
    I = MetricFactor.identity(n)
    junctions = [identity_junction(k, n) for k in range(N)]

    def close(f):
        if port == "reflect":
            f.w_plus[0] = input_scatter(f.w_minus[0], I, np.zeros_like(f.w_minus[0]))
            f.w_minus[N] = terminal_scatter(f.w_plus[N], I, np.zeros_like(f.w_plus[N]))
        else:
            f.w_plus[0] = np.zeros_like(f.w_plus[0])
            f.w_minus[N] = np.zeros_like(f.w_minus[N])
        return f

    field = close(field.copy())
    V = [wave_energy(field, grid.dt, quadrature)]
    for _ in range(steps):
        field = close(upwind_transport(field, grid, junctions))
        V.append(wave_energy(field, grid.dt, quadrature))
    return np.array(V)


def manufactured_defect(N, nu=0.5, c=1.0):
    """Energy-balance defect for one step on smooth manufactured waves and sources."""
    dt = 1.0 / N
    grid = GridConfig(N + 1, dt=dt, dtau=nu * dt / c, c=c)
    t = np.linspace(0.0, 1.0, N + 1)
    wp = [np.array([[1.0 + np.sin(np.pi * s)], [np.cos(2 * s)]]) for s in t]
    wm = [np.array([[np.cos(np.pi * s)], [0.5 * s * s]]) for s in t]
    Ep = [np.array([[np.sin(s)], [0.3]]) for s in t]
    Em = [np.array([[s], [np.cos(s)]]) for s in t]
    field = WaveField(wp, wm)
    junctions = [identity_junction(k, 2) for k in range(N)]
    moved = upwind_transport(field, grid, junctions)
    new = WaveField([p - grid.alpha * e for p, e in zip(moved.w_plus, Ep)],
                    [m - grid.alpha * e for m, e in zip(moved.w_minus, Em)])
    return energy_balance_report(field, new, Ep, Em, grid).defect


@_timed("energy dissipation and balance consistency")
def check_energy(nus=(0.25, 0.5, 1.0), N=32, steps=300, seed=0, refinements=(16, 32, 64, 128, 256)):
    rng = np.random.default_rng(seed)
    ok, parts = True, []
    for nu in nus:
        grid = GridConfig.from_courant(N + 1, nu)
        mono = True
        for port in ("reflect", "absorb"):
            for _ in range(5):
                f0 = WaveField([rng.standard_normal((2, 1)) for _ in range(N + 1)],
                               [rng.standard_normal((2, 1)) for _ in range(N + 1)])
                series = passivity_monitor([{"energy": v, "input_margin": 0.0, "terminal_margin": 0.0,
                                             "source_work": 0.0} for v in passive_run(f0, grid, steps, port)])
                mono &= series.nonincreasing
        ok &= mono
        parts.append(f"nu={nu}: V non-increasing={mono}")
    defects = np.array([manufactured_defect(n) for n in refinements])
    h = 1.0 / np.array(refinements)
    order = float(np.polyfit(np.log(h), np.log(defects), 1)[0])
    ok &= order >= 0.8
    parts.append(f"balance defect order {order:.2f} (need >= 0.8)")
    return ok, "; ".join(parts)


# --- 7 ---------------------------------------------------------------------------


@_timed("CFL instability witness")
def check_cfl(N=32, steps=200, seed=0, factor=10.0):
    rng = np.random.default_rng(seed)
    f0 = WaveField([rng.standard_normal((2, 1)) for _ in range(N + 1)],
                   [rng.standard_normal((2, 1)) for _ in range(N + 1)])
    growth = {}
    for nu in (1.2, 1.0):
        V = passive_run(f0, GridConfig.from_courant(N + 1, nu), steps)
        growth[nu] = float(np.max(V) / V[0])
    ok = growth[1.2] > factor and growth[1.0] <= factor
    return ok, f"max V growth: nu=1.2 -> {growth[1.2]:.3g}x, nu=1.0 -> {growth[1.0]:.3g}x (threshold {factor:g}x)"


# --- 8 ---------------------------------------------------------------------------


@_timed("minimal reflection and Newton port")
def check_reflection(instances=1000, tol=1e-12, seed=0, eta=0.1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(1, 9))
        A = rng.standard_normal((n, n))
        Z = A @ A.T + 0.1 * np.eye(n)
        e = rng.standard_normal(n)
        phi = matched_flow(-e, Z)
        _, b = port_scatter(e, phi, Z)
        worst = max(worst, np.abs(b).max() / max(1.0, np.abs(e).max()))
    H = np.diag([1.0, 4.0])
    theta_star = np.array([0.7, -1.3])
    theta = np.array([2.0, 1.5])
    grad = H @ (theta - theta_star)
    newton_flow = -np.linalg.solve(H, grad)
    r_res = reflection_norm(-grad, newton_flow, np.eye(2) / eta)
    r_curv = reflection_norm(-grad, newton_flow, H)
    new = step_curvature(theta, grad, H, 1.0)
    newton_err = float(np.abs(new - theta_star).max())
    ok = worst <= tol and r_res > 0 and r_curv <= tol and newton_err <= tol
    return ok, (f"max |b| {worst:.1e}; reflection Z=I/eta {r_res:.3g}, Z=H {r_curv:.1e}; "
                f"Newton one-step error {newton_err:.1e}")


# --- 9 ---------------------------------------------------------------------------

XOR_SETTINGS = dict(nu=0.5, alpha=1.0, eta=0.2, update_every=4, updates=1000, seed=0)


@_timed("XOR end-to-end training", limit=120.0)
def check_training(nu=0.5, alpha=1.0, eta=0.2, update_every=4, updates=1000, seed=0,
                   target=0.05, ratio=2.0):
    X, Y = dataset_xor()
    net = make_mlp([2, 2, 1], "tanh", seed)
    base = make_mlp([2, 2, 1], "tanh", seed)
    cfg = TrainConfig(GridConfig.from_courant(net.depth + 1, nu, alpha=alpha), eta=eta,
                      update_every=update_every, budget=updates * update_every, log_every=100)
    try:
        _, rows = train(net, [(X, Y)], cfg)
    except RuntimeError as exc:
        return False, f"wave run failed: {exc}"
    wave = rows[-1].rollout_loss
    _, losses = sgd_baseline(base, [(X, Y)], eta, updates)
    sgd = losses[-1]
    ok = wave <= target and wave <= ratio * sgd
    return ok, (f"wave loss {wave:.2e} vs SGD {sgd:.2e} after {updates} updates "
                f"({cfg.budget} solver steps, eta={eta})")


# --- 10 --------------------------------------------------------------------------


@_timed("LQR equivalence with the Riccati oracle", limit=60.0)
def check_lqr(N=32, tol=1e-3, nu=0.5, alpha=1.0, eta=1.0, budget=2000, refinements=(16, 32, 64, 128, 256)):
    p = scalar_lqr(T=1.0, N=N)
    lin = p.linear
    sol = lqr_riccati_oracle(lin["A"], lin["B"], lin["Q"], lin["R"], lin["Q_T"], p.T, N, p.x0)
    net = euler_layerize(p)
    cfg = TrainConfig(GridConfig.from_courant(N + 1, nu, alpha=alpha), optimizer="curvature", eta=eta,
                      hessians=control_hessians(p, net), budget=budget, tol=1e-12, log_every=100)
    try:
        state, rows = train(net, [(p.x0, np.zeros(1))], cfg)
    except RuntimeError as exc:
        return False, f"relaxation failed: {exc}"
    err = float(np.abs(controls_of(state.params) - np.array(sol.u)).max())
    errs = []
    for n in refinements:
        s = lqr_riccati_oracle(lin["A"], lin["B"], lin["Q"], lin["R"], lin["Q_T"], 1.0, n)
        t = np.linspace(0.0, 1.0, n + 1)
        errs.append(max(abs(float(s.P[k][0, 0]) - np.tanh(1.0 - t[k])) for k in range(n + 1)))
    order = float(np.polyfit(np.log(1.0 / np.array(refinements)), np.log(errs), 1)[0])
    ok = err <= tol and order >= 0.8
    return ok, (f"control inf-norm error {err:.1e} after {state.n} steps (tol {tol:g}); "
                f"Riccati vs tanh order {order:.2f}")


# --- 11 --------------------------------------------------------------------------


@_timed("unlocked layer updates in the async harness")
def check_unlocked(N=32, width=2, nu=1.0, alpha=0.5, steps=20, seed=0):
    net = make_mlp([width] * (N + 1), "tanh", seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(width)
    y = rng.standard_normal(width)
    cfg = TrainConfig(GridConfig.from_courant(N + 1, nu, alpha=alpha), eta=0.05, budget=steps)
    s_sync, m_sync = relax(init_state(net, cfg), net, (x, y), cfg)
    trace = HarnessTrace()
    s_async, m_async = async_run(net, (x, y), cfg, trace=trace)
    identical = (len(m_sync) == len(m_async)
                 and all(a.deterministic() == b.deterministic() for a, b in zip(m_sync, m_async))
                 and all(np.array_equal(a, b) for a, b in zip(s_sync.params, s_async.params))
                 and all(np.array_equal(a, b) for a, b in
                         zip(s_sync.field.w_plus + s_sync.field.w_minus,
                             s_async.field.w_plus + s_async.field.w_minus)))
    bound = N / nu
    changes = trace.param_changes.get(0, [])
    first = changes[0] if changes else None
    # a different target cannot reach layer 0 before tick N: its updates must not depend on it
    trace2 = HarnessTrace()
    async_run(net, (x, -y), cfg, trace=trace2)
    early = [t for t in changes if t < N]
    causal = early == [t for t in trace2.param_changes.get(0, []) if t < N]
    ok = (first is not None and first < bound and trace.max_messages <= 2 and identical and causal)
    return ok, (f"layer-0 first update at tick {first} (< {bound:g}), {len(early)} updates before tick {N}; "
                f"max messages/tick/worker {trace.max_messages}; lockstep == sync: {identical}; "
                f"early updates independent of target: {causal}")


CRITERIA: List[Callable[..., CheckResult]] = [
    check_roundtrip, check_pure_shift, check_boundary_clamp, check_gradient_oracle, check_relaxation,
    check_energy, check_cfl, check_reflection, check_training, check_lqr, check_unlocked,
]

SUITES: Dict[str, List[Callable[..., CheckResult]]] = {
    "roundtrip": [check_roundtrip],
    "shift": [check_pure_shift],
    "boundary": [check_boundary_clamp],
    "gradient": [check_gradient_oracle],
    "relaxation": [check_relaxation],
    "energy": [check_energy],
    "cfl": [check_cfl],
    "reflection": [check_reflection],
    "training": [check_training],
    "lqr": [check_lqr],
    "unlocked": [check_unlocked],
    "all": CRITERIA,
}


def run_suite(name) -> List[CheckResult]:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; available: {', '.join(sorted(SUITES))}")
    return [check() for check in SUITES[name]]
