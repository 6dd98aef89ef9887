"""Continuous-time optimal control as a layered map via explicit Euler.

Layer ``k`` is ``x_{k+1} = x_k + dt f(x_k, u_k)`` with parameters
``theta_k = u_k`` and penalty ``R_k = dt L(x_k, u_k)``; the terminal loss is
``Phi``.  A discrete Riccati recursion provides an independent oracle for
linear-quadratic problems.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .layers import CallableLoss, LayerMap, _as_cols, _like
from .pmp import NetworkSpec, forward_rollout, node_residuals
from .ports import NotPositiveDefiniteError


@dataclass
class ControlProblem:
    """``min Phi(x(T)) + int_0^T L(x, u) dt`` subject to ``x' = f(x, u)``, ``x(0) = x0``.

    Derivative handles act on single vectors: ``f_x``/``f_u`` return
    Jacobians, ``L_x``/``L_u``/``Phi_x`` gradients.  ``L_uu`` (optional) is
    the control Hessian of ``L`` used by the curvature port.
    """

    f: Callable
    f_x: Callable
    f_u: Callable
    L: Callable
    L_x: Callable
    L_u: Callable
    Phi: Callable
    Phi_x: Callable
    T: float
    N: int
    x0: np.ndarray
    m: int
    L_uu: Optional[Callable] = None
    name: str = "custom"
    linear: Optional[dict] = None   # A, B, Q, R, Q_T when linear-quadratic

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be >= 2")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        self.x0 = np.asarray(self.x0, dtype=float).ravel()

    @property
    def n(self) -> int:
        return self.x0.size

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.N + 1)

    def check_gradients(self, rng=None, eps=1e-6, rtol=1e-5, trials=3):
        """Central-difference checks of every derivative handle."""
        rng = np.random.default_rng(0) if rng is None else rng
        worst = 0.0
        for _ in range(trials):
            x = rng.standard_normal(self.n)
            u = rng.standard_normal(self.m)
            dx = rng.standard_normal(self.n)
            du = rng.standard_normal(self.m)
            pairs = [
                ((self.f(x + eps * dx, u) - self.f(x - eps * dx, u)) / (2 * eps), self.f_x(x, u) @ dx),
                ((self.f(x, u + eps * du) - self.f(x, u - eps * du)) / (2 * eps), self.f_u(x, u) @ du),
                ((self.L(x + eps * dx, u) - self.L(x - eps * dx, u)) / (2 * eps), self.L_x(x, u) @ dx),
                ((self.L(x, u + eps * du) - self.L(x, u - eps * du)) / (2 * eps), self.L_u(x, u) @ du),
                ((self.Phi(x + eps * dx) - self.Phi(x - eps * dx)) / (2 * eps), self.Phi_x(x) @ dx),
            ]
            for fd, an in pairs:
                fd, an = np.atleast_1d(fd), np.atleast_1d(an)
                worst = max(worst, float(np.abs(fd - an).max() / max(1.0, np.abs(an).max())))
        if worst > rtol:
            raise AssertionError(f"{self.name}: gradient handle check failed (rel err {worst:.2e})")
        return worst


class RunningCost:
    """Penalty ``dt * L(x, u)`` summed over batch columns."""

    def __init__(self, problem: ControlProblem):
        self.p = problem

    def value(self, x, theta):
        X = _as_cols(x)
        return self.p.dt * float(sum(self.p.L(X[:, j], theta) for j in range(X.shape[1])))

    def grad_x(self, x, theta):
        X = _as_cols(x)
        G = np.column_stack([self.p.L_x(X[:, j], theta) for j in range(X.shape[1])])
        return _like(self.p.dt * G, x)

    def grad_theta(self, x, theta):
        X = _as_cols(x)
        return self.p.dt * sum(np.asarray(self.p.L_u(X[:, j], theta), dtype=float)
                               for j in range(X.shape[1]))


class EulerLayer(LayerMap):
    """One explicit Euler step with the control as the layer parameter."""

    def __init__(self, problem: ControlProblem, u0=None):
        self.p = problem
        self.in_dim = self.out_dim = problem.n
        u0 = np.zeros(problem.m) if u0 is None else u0
        super().__init__(u0, RunningCost(problem))

    def _cols(self, fn, x, theta):
        X = _as_cols(x)
        th = self.theta if theta is None else theta
        return X, th, [fn(X[:, j], th) for j in range(X.shape[1])]

    def forward(self, x, theta=None):
        X, th, fs = self._cols(self.p.f, x, theta)
        return _like(X + self.p.dt * np.column_stack(fs), x)

    def jvp(self, x, v, theta=None):
        X, th, Js = self._cols(self.p.f_x, x, theta)
        V = _as_cols(v)
        return _like(V + self.p.dt * np.column_stack([J @ V[:, j] for j, J in enumerate(Js)]), v)

    def vjp(self, x, u, theta=None):
        X, th, Js = self._cols(self.p.f_x, x, theta)
        U = _as_cols(u)
        return _like(U + self.p.dt * np.column_stack([J.T @ U[:, j] for j, J in enumerate(Js)]), u)

    def param_vjp(self, x, u, theta=None):
        X, th, Bs = self._cols(self.p.f_u, x, theta)
        U = _as_cols(u)
        return self.p.dt * sum(B.T @ U[:, j] for j, B in enumerate(Bs))

    def __repr__(self):
        return f"EulerLayer({self.p.name}, dt={self.p.dt:g})"


def euler_layerize(problem: ControlProblem, u_init=None) -> NetworkSpec:
    """Network whose layer ``k`` is the Euler step with parameters ``u_k``."""
    u_init = np.zeros((problem.N, problem.m)) if u_init is None else np.asarray(u_init, dtype=float)
    layers = [EulerLayer(problem, u_init[k]) for k in range(problem.N)]
    loss = CallableLoss(lambda x: problem.Phi(x), lambda x: problem.Phi_x(x))
    return NetworkSpec(layers, loss)


def control_hessians(problem: ControlProblem, net: NetworkSpec):
    """Per-layer ``d^2 H_k / du^2`` for control-affine dynamics (``dt * L_uu``)."""
    if problem.L_uu is None:
        return [problem.dt * np.eye(problem.m) for _ in range(problem.N)]
    return [lambda u, p=problem: p.dt * np.atleast_2d(p.L_uu(u)) for _ in range(problem.N)]


def scaled_residuals(x, lam, u, problem: ControlProblem):
    """``E_x,k = (x_{k+1} - x_k - dt f) / dt`` and ``E_lam,k = (lam_k - grad_x H_k) / dt``.

    ``x``/``lam`` list ``N + 1`` node vectors, ``u`` lists ``N`` controls.
    Returns two lists of length ``N`` (``k = 0..N-1``).
    """
    net = euler_layerize(problem, u)
    xs = [_as_cols(v) for v in x]
    lams = [_as_cols(v) for v in lam]
    res = node_residuals(net, xs, lams, xs[0], None, [np.asarray(v, dtype=float) for v in u])
    dt = problem.dt
    E_x = [res.r_x[k + 1][:, 0] / dt for k in range(problem.N)]
    E_lam = [res.r_lam[k][:, 0] / dt for k in range(problem.N)]
    return E_x, E_lam


@dataclass
class RiccatiSolution:
    gains: List[np.ndarray]
    P: List[np.ndarray]
    x: List[np.ndarray]
    u: List[np.ndarray]
    lam: List[np.ndarray]
    cost: float


def lqr_riccati_oracle(A, B, Q, R_cost, Q_T, T, N, x0=None) -> RiccatiSolution:
    """Backward Riccati recursion for the Euler-discretized LQ problem.

    The discrete problem is ``x_{k+1} = (I + dt A) x_k + dt B u_k`` with
    cost ``sum_k dt/2 (x'Qx + u'Ru) + 1/2 x_N' Q_T x_N``.  ``P_k`` is the
    value matrix (``V_k(x) = x' P_k x / 2``) and ``u_k = -K_k x_k``.
    """
    A, B = np.atleast_2d(A).astype(float), np.atleast_2d(B).astype(float)
    Q, Q_T = np.atleast_2d(Q).astype(float), np.atleast_2d(Q_T).astype(float)
    R_cost = np.atleast_2d(R_cost).astype(float)
    n, m = B.shape
    if np.any(np.linalg.eigvalsh(0.5 * (R_cost + R_cost.T)) <= 0) or not np.allclose(R_cost, R_cost.T):
        raise NotPositiveDefiniteError("R_cost must be symmetric positive definite")
    for M, name in ((Q, "Q"), (Q_T, "Q_T")):
        if np.min(np.linalg.eigvalsh(0.5 * (M + M.T))) < -1e-12:
            raise ValueError(f"{name} must be positive semidefinite")
    dt = T / N
    Ad = np.eye(n) + dt * A
    Bd = dt * B
    P = [None] * (N + 1)
    K = [None] * N
    P[N] = Q_T.copy()
    for k in range(N - 1, -1, -1):
        S = dt * R_cost + Bd.T @ P[k + 1] @ Bd
        K[k] = np.linalg.solve(S, Bd.T @ P[k + 1] @ Ad)
        Pk = dt * Q + Ad.T @ P[k + 1] @ (Ad - Bd @ K[k])
        P[k] = 0.5 * (Pk + Pk.T)
    xs, us, lams = [], [], []
    cost = 0.0
    if x0 is not None:
        x = np.asarray(x0, dtype=float).ravel()
        xs.append(x)
        for k in range(N):
            u = -K[k] @ x
            us.append(u)
            cost += 0.5 * dt * (x @ Q @ x + u @ R_cost @ u)
            x = Ad @ x + Bd @ u
            xs.append(x)
        cost += 0.5 * x @ Q_T @ x
        lams = [None] * (N + 1)
        lams[N] = Q_T @ xs[N]
        for k in range(N - 1, -1, -1):
            lams[k] = Ad.T @ lams[k + 1] + dt * Q @ xs[k]
    return RiccatiSolution(K, P, xs, us, lams, cost)


def linear_quadratic(A, B, Q, R_cost, Q_T, T, N, x0, name="lqr") -> ControlProblem:
    A, B = np.atleast_2d(A).astype(float), np.atleast_2d(B).astype(float)
    Q, R_cost, Q_T = (np.atleast_2d(M).astype(float) for M in (Q, R_cost, Q_T))
    return ControlProblem(
        f=lambda x, u: A @ x + B @ u,
        f_x=lambda x, u: A,
        f_u=lambda x, u: B,
        L=lambda x, u: 0.5 * float(x @ Q @ x + u @ R_cost @ u),
        L_x=lambda x, u: Q @ x,
        L_u=lambda x, u: R_cost @ u,
        Phi=lambda x: 0.5 * float(x @ Q_T @ x),
        Phi_x=lambda x: Q_T @ x,
        T=T, N=N, x0=x0, m=B.shape[1], L_uu=lambda u: R_cost, name=name,
        linear={"A": A, "B": B, "Q": Q, "R": R_cost, "Q_T": Q_T})


def scalar_lqr(T=1.0, N=32, x0=1.0) -> ControlProblem:
    """``x' = u``, ``L = (x^2 + u^2)/2``, ``Phi = 0``; continuous value ``P(t) = tanh(T - t)``."""
    return linear_quadratic([[0.0]], [[1.0]], [[1.0]], [[1.0]], [[0.0]], T, N, [x0], "scalar_lqr")


def lqr_2d(T=2.0, N=40, x0=(1.0, 0.0)) -> ControlProblem:
    """Double integrator with unit state, control and terminal weights."""
    A = [[0.0, 1.0], [0.0, 0.0]]
    B = [[0.0], [1.0]]
    return linear_quadratic(A, B, np.eye(2), [[1.0]], np.eye(2), T, N, x0, "lqr_2d")


def pendulum(T=3.0, N=60, r=0.1, w=1.0) -> ControlProblem:
    """Torque-driven pendulum swing-up from rest at the bottom (no oracle)."""
    goal = np.array([np.pi, 0.0])
    return ControlProblem(
        f=lambda x, u: np.array([x[1], -np.sin(x[0]) + u[0]]),
        f_x=lambda x, u: np.array([[0.0, 1.0], [-np.cos(x[0]), 0.0]]),
        f_u=lambda x, u: np.array([[0.0], [1.0]]),
        L=lambda x, u: 0.5 * r * float(u @ u),
        L_x=lambda x, u: np.zeros(2),
        L_u=lambda x, u: r * np.asarray(u, dtype=float),
        Phi=lambda x: 0.5 * w * float((x - goal) @ (x - goal)),
        Phi_x=lambda x: w * (x - goal),
        T=T, N=N, x0=np.zeros(2), m=1, L_uu=lambda u: r * np.eye(1), name="pendulum")


PROBLEMS = {"scalar_lqr": scalar_lqr, "lqr_2d": lqr_2d, "pendulum": pendulum}


def make_problem(name, **kwargs) -> ControlProblem:
    if name not in PROBLEMS:
        raise KeyError(f"unknown control problem {name!r}; choose from {sorted(PROBLEMS)}")
    return PROBLEMS[name](**kwargs)


def controls_of(params) -> np.ndarray:
    return np.array([np.asarray(p, dtype=float).ravel() for p in params])
