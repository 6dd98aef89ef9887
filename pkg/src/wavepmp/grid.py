"""Worldsheet grid types and the state/costate <-> wave change of variables.

Node arrays are stored column-wise: a node of width ``n`` holding a batch of
``B`` samples is an ``(n, B)`` array.  One-dimensional vectors are accepted
everywhere a single sample is meant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

SQRT2 = np.sqrt(2.0)


class DimensionError(ValueError):
    """Raised when array shapes do not match the declared node widths."""


@dataclass(frozen=True)
class GridConfig:
    """Discretization of the (depth, solver-time) worldsheet.

    ``nu`` is derived as ``c * dtau / dt``.  ``alpha`` defaults to ``c * dtau``.
    """

    num_nodes: int
    dt: float = 1.0
    dtau: float = 1.0
    c: float = 1.0
    alpha: Optional[float] = None
    gamma: float = 0.0

    def __post_init__(self):
        if self.num_nodes < 2:
            raise ValueError("num_nodes must be >= 2 (nodes k = 0..N)")
        for name in ("dt", "dtau", "c"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be positive, got {v!r}")
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.c * self.dtau)
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha!r}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma!r}")

    @property
    def nu(self) -> float:
        return self.c * self.dtau / self.dt

    @property
    def N(self) -> int:
        return self.num_nodes - 1

    def validate_cfl(self):
        nu = self.nu
        if not (0.0 < nu <= 1.0):
            raise ValueError(f"Courant number nu={nu:g} outside (0, 1]")

    @classmethod
    def from_courant(cls, num_nodes, nu, dt=1.0, c=1.0, alpha=None, gamma=0.0):
        """Build a grid with a prescribed Courant number."""
        return cls(num_nodes=num_nodes, dt=dt, dtau=nu * dt / c, c=c,
                   alpha=alpha, gamma=gamma)


class MetricFactor:
    """Invertible per-node factor ``Theta`` of the metric ``M = Theta^T Theta``.

    Inverse and inverse-transpose are computed once at construction.
    """

    def __init__(self, matrix):
        m = np.atleast_2d(np.asarray(matrix, dtype=float))
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"metric factor must be square, got {m.shape}")
        cond = np.linalg.cond(m)
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError("metric factor is singular")
        self.matrix = m
        self.inv = np.linalg.inv(m)
        self.inv_t = self.inv.T.copy()
        self.is_identity = bool(np.array_equal(m, np.eye(m.shape[0])))

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n))

    @classmethod
    def scalar(cls, s, n):
        return cls(s * np.eye(n))

    @classmethod
    def diagonal(cls, d):
        return cls(np.diag(np.asarray(d, dtype=float)))

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def metric(self):
        return self.matrix.T @ self.matrix

    def _check(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise DimensionError(f"expected leading dim {self.n}, got {v.shape}")
        return v

    def apply(self, v):
        if self.is_identity:
            return self._check(v).copy()
        return self.matrix @ self._check(v)

    def apply_t(self, v):
        if self.is_identity:
            return self._check(v).copy()
        return self.matrix.T @ self._check(v)

    def apply_inv(self, v):
        if self.is_identity:
            return self._check(v).copy()
        return self.inv @ self._check(v)

    def apply_inv_t(self, v):
        if self.is_identity:
            return self._check(v).copy()
        return self.inv_t @ self._check(v)

    def __repr__(self):
        return f"MetricFactor(n={self.n}, identity={self.is_identity})"


def default_metrics(widths: Sequence[int]) -> List[MetricFactor]:
    return [MetricFactor.identity(n) for n in widths]


def matched_metrics(widths: Sequence[int], batch_size: int) -> List[MetricFactor]:
    """Scalar metrics ``I / sqrt(B)`` for a loss averaged over ``B`` samples.

    Costates of a batch-mean loss scale like ``1/B`` while states stay O(1);
    this choice puts ``Theta x`` and ``Theta^-T lambda`` on the same scale.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    s = 1.0 / np.sqrt(batch_size)
    return [MetricFactor.identity(n) if batch_size == 1 else MetricFactor.scalar(s, n) for n in widths]


@dataclass
class WaveField:
    """Forward and backward wave vectors at every depth node."""

    w_plus: List[np.ndarray]
    w_minus: List[np.ndarray]
    n: int = 0

    def __post_init__(self):
        if len(self.w_plus) != len(self.w_minus):
            raise DimensionError("w_plus and w_minus must have the same node count")
        for k, (p, m) in enumerate(zip(self.w_plus, self.w_minus)):
            if np.shape(p) != np.shape(m):
                raise DimensionError(f"node {k}: wave shapes differ {np.shape(p)} vs {np.shape(m)}")

    @classmethod
    def zeros(cls, widths: Sequence[int], batch: int = 1):
        return cls([np.zeros((n, batch)) for n in widths],
                   [np.zeros((n, batch)) for n in widths])

    @property
    def num_nodes(self) -> int:
        return len(self.w_plus)

    @property
    def widths(self) -> List[int]:
        return [p.shape[0] for p in self.w_plus]

    def copy(self) -> "WaveField":
        return WaveField([p.copy() for p in self.w_plus],
                         [m.copy() for m in self.w_minus], self.n)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) and np.all(np.isfinite(m))
                   for p, m in zip(self.w_plus, self.w_minus))

    def check_widths(self, widths: Sequence[int]):
        if list(widths) != self.widths:
            raise DimensionError(f"wave widths {self.widths} != network widths {list(widths)}")


@dataclass
class NodeState:
    """States ``x_k`` and costates ``lambda_k`` for every node."""

    x: List[np.ndarray] = field(default_factory=list)
    lam: List[np.ndarray] = field(default_factory=list)


def wave_transform(x, lam, theta: MetricFactor):
    """Map a state/costate pair to forward and backward waves.

    ``w_plus = (Theta x + Theta^{-T} lam) / sqrt(2)`` and
    ``w_minus = (Theta x - Theta^{-T} lam) / sqrt(2)``.
    """
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if x.shape != lam.shape:
        raise DimensionError(f"state {x.shape} and costate {lam.shape} differ")
    p = theta.apply(x)
    q = theta.apply_inv_t(lam)
    return (p + q) / SQRT2, (p - q) / SQRT2


def inverse_wave_transform(w_plus, w_minus, theta: MetricFactor):
    """Recover ``(x, lam)`` from a pair of waves."""
    w_plus = np.asarray(w_plus, dtype=float)
    w_minus = np.asarray(w_minus, dtype=float)
    if w_plus.shape != w_minus.shape:
        raise DimensionError(f"wave shapes differ: {w_plus.shape} vs {w_minus.shape}")
    x = theta.apply_inv(w_plus + w_minus) / SQRT2
    lam = theta.apply_t(w_plus - w_minus) / SQRT2
    return x, lam


def power_split(w_plus, w_minus) -> float:
    """Power carried by a wave pair, ``(|w+|^2 - |w-|^2) / 2``."""
    w_plus = np.asarray(w_plus, dtype=float)
    w_minus = np.asarray(w_minus, dtype=float)
    if w_plus.shape != w_minus.shape:
        raise DimensionError(f"wave shapes differ: {w_plus.shape} vs {w_minus.shape}")
    return 0.5 * (float(np.sum(w_plus * w_plus)) - float(np.sum(w_minus * w_minus)))


def field_to_nodes(wf: WaveField, thetas: Sequence[MetricFactor]) -> NodeState:
    xs, lams = [], []
    for p, m, th in zip(wf.w_plus, wf.w_minus, thetas):
        x, lam = inverse_wave_transform(p, m, th)
        xs.append(x)
        lams.append(lam)
    return NodeState(xs, lams)


def nodes_to_field(state: NodeState, thetas: Sequence[MetricFactor], n: int = 0) -> WaveField:
    wp, wm = [], []
    for x, lam, th in zip(state.x, state.lam, thetas):
        p, m = wave_transform(x, lam, th)
        wp.append(p)
        wm.append(m)
    return WaveField(wp, wm, n)
