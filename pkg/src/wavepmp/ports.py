"""Parameter ports: impedance, scattering waves and the matched update laws.

The effort at a parameter port is ``e = -grad J`` and the flow is the
parameter velocity ``phi``.  For an impedance ``Z`` (SPD) the incident and
reflected waves are

    a = (Z^{-1/2} e + Z^{1/2} phi) / sqrt(2)
    b = (Z^{-1/2} e - Z^{1/2} phi) / sqrt(2)

and ``phi = Z^{-1} e`` is the unique flow with ``b = 0``.  Resistive,
curvature and inductive impedances give gradient descent, Newton and
heavy-ball updates respectively.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .grid import SQRT2

EIG_FLOOR = 1e-10


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


class CurvatureFallbackWarning(RuntimeWarning):
    """The curvature impedance was unusable; a resistive step was taken."""


@dataclass
class _ZOps:
    mul: Callable
    mul_sqrt: Callable
    mul_inv_sqrt: Callable
    solve: Callable


def _spd_ops(Z) -> _ZOps:
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.shape[0] != Z.shape[1]:
        raise ValueError(f"impedance must be square, got {Z.shape}")
    if not np.allclose(Z, Z.T, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(Z).max())):
        raise NotPositiveDefiniteError("impedance is not symmetric")
    evals, V = np.linalg.eigh(0.5 * (Z + Z.T))
    if evals.min() < EIG_FLOOR:
        raise NotPositiveDefiniteError(f"impedance eigenvalue {evals.min():.3g} below {EIG_FLOOR}")
    s = np.sqrt(evals)
    Zs = (V * s) @ V.T
    Zis = (V / s) @ V.T
    Zinv = (V / evals) @ V.T
    return _ZOps(lambda v: Z @ v, lambda v: Zs @ v, lambda v: Zis @ v, lambda v: Zinv @ v)


def _diag_ops(d) -> _ZOps:
    d = np.asarray(d, dtype=float)
    if np.any(d < EIG_FLOOR):
        raise NotPositiveDefiniteError("diagonal impedance must be positive")
    s = np.sqrt(d)
    return _ZOps(lambda v: d * v, lambda v: s * v, lambda v: v / s, lambda v: v / d)


class Impedance:
    """Characteristic impedance of a parameter port.

    Use the constructors: :meth:`resistive`, :meth:`diagonal`, :meth:`full`,
    :meth:`curvature` or :meth:`inductive`.
    """

    KINDS = ("resistive", "diagonal", "full", "curvature", "inductive")

    def __init__(self, kind, value=None, hessian=None, R=None, L=None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown impedance kind {kind!r}")
        self.kind = kind
        self.value = value
        self.hessian = hessian
        self.R = R
        self.L = L

    @classmethod
    def resistive(cls, eta):
        if not eta > 0:
            raise ValueError("learning rate eta must be positive")
        return cls("resistive", value=1.0 / float(eta))

    @classmethod
    def diagonal(cls, d):
        _diag_ops(d)
        return cls("diagonal", value=np.asarray(d, dtype=float))

    @classmethod
    def full(cls, Z):
        _spd_ops(Z)
        return cls("full", value=np.asarray(Z, dtype=float))

    @classmethod
    def curvature(cls, hessian):
        """``hessian`` is a matrix or a callable ``theta -> matrix``."""
        return cls("curvature", hessian=hessian)

    @classmethod
    def inductive(cls, R, L):
        if not (R > 0 and L > 0):
            raise ValueError("inductive impedance needs R > 0 and L > 0")
        return cls("inductive", R=float(R), L=float(L))

    def ops(self, theta=None) -> _ZOps:
        """Static operator handles.  Inductive ports use their resistive part."""
        if self.kind == "resistive":
            z = self.value
            return _ZOps(lambda v: z * v, lambda v: np.sqrt(z) * v,
                         lambda v: v / np.sqrt(z), lambda v: v / z)
        if self.kind == "diagonal":
            return _diag_ops(self.value)
        if self.kind == "full":
            return _spd_ops(self.value)
        if self.kind == "curvature":
            H = self.hessian(theta) if callable(self.hessian) else self.hessian
            return _spd_ops(H)
        return _ZOps(lambda v: self.R * v, lambda v: np.sqrt(self.R) * v,
                     lambda v: v / np.sqrt(self.R), lambda v: v / self.R)

    def __repr__(self):
        if self.kind == "inductive":
            return f"Impedance(inductive, R={self.R}, L={self.L})"
        return f"Impedance({self.kind})"


def _as_ops(Z, theta=None) -> _ZOps:
    if isinstance(Z, Impedance):
        return Z.ops(theta)
    if np.ndim(Z) == 0:
        z = float(Z)
        if z < EIG_FLOOR:
            raise NotPositiveDefiniteError("scalar impedance must be positive")
        return Impedance("resistive", value=z).ops()
    return _spd_ops(Z)


def port_scatter(e, phi, Z):
    """Incident and reflected waves ``(a, b)`` at a parameter port."""
    ops = _as_ops(Z)
    e = np.asarray(e, dtype=float)
    phi = np.asarray(phi, dtype=float)
    u = ops.mul_inv_sqrt(e)
    v = ops.mul_sqrt(phi)
    return (u + v) / SQRT2, (u - v) / SQRT2


def reflection_norm(e, phi, Z) -> float:
    """Squared norm of the reflected wave, ``|b|^2``."""
    _, b = port_scatter(e, phi, Z)
    return float(np.dot(np.ravel(b), np.ravel(b)))


def matched_flow(grad_J, Z):
    """Zero-reflection flow ``-Z^{-1} grad_J``."""
    return -_as_ops(Z).solve(np.asarray(grad_J, dtype=float))


def step_resistive(theta, grad_J, eta):
    return np.asarray(theta, dtype=float) - eta * np.asarray(grad_J, dtype=float)


def step_inductive(theta, velocity, grad_J, R, L, dtau):
    """Semi-implicit Euler step of ``-grad J = R v + L dv/dtau``."""
    if not (R > 0 and L > 0 and dtau > 0):
        raise ValueError("R, L and dtau must be positive")
    v = np.asarray(velocity, dtype=float)
    v_next = v + (dtau / L) * (-np.asarray(grad_J, dtype=float) - R * v)
    return np.asarray(theta, dtype=float) + dtau * v_next, v_next


def step_curvature(theta, grad_J, hessian, eta):
    """Newton-type step ``theta - eta * H^{-1} grad_J``.

    If ``H`` is not SPD a resistive step is taken instead and a
    :class:`CurvatureFallbackWarning` is emitted.
    """
    theta = np.asarray(theta, dtype=float)
    g = np.asarray(grad_J, dtype=float)
    H = hessian(theta) if callable(hessian) else hessian
    H = np.atleast_2d(np.asarray(H, dtype=float))
    try:
        if not np.allclose(H, H.T):
            raise np.linalg.LinAlgError("Hessian is not symmetric")
        c = np.linalg.cholesky(H)
        if np.min(np.abs(np.diag(c))) ** 2 < EIG_FLOOR:
            raise np.linalg.LinAlgError("Hessian is numerically singular")
        d = np.linalg.solve(c.T, np.linalg.solve(c, g))
    except np.linalg.LinAlgError as exc:
        warnings.warn(f"curvature impedance unusable ({exc}); using resistive step",
                      CurvatureFallbackWarning, stacklevel=2)
        return step_resistive(theta, g, eta)
    return theta - eta * d


# --- per-layer port objects used by the trainer --------------------------------


class ResistivePort:
    """``theta <- theta - eta * r_theta``; impedance ``(1/eta) I``."""

    def __init__(self, eta):
        self.eta = float(eta)

    def impedance(self, theta=None):
        return Impedance("resistive", value=1.0 / self.eta) if self.eta > 0 else None

    def update(self, k, theta, r_theta):
        if self.eta == 0.0:
            return theta.copy(), np.zeros_like(theta)
        new = step_resistive(theta, r_theta, self.eta)
        return new, new - theta


class DiagonalPort:
    """Per-parameter preconditioned step ``theta - eta * r_theta / d``."""

    def __init__(self, eta, scales):
        self.eta = float(eta)
        self.scales = [np.asarray(s, dtype=float) for s in scales]

    def impedance(self, k):
        return Impedance.diagonal(self.scales[k] / self.eta)

    def update(self, k, theta, r_theta):
        new = theta - self.eta * r_theta / self.scales[k]
        return new, new - theta


class InductivePort:
    """Heavy-ball port with per-layer velocity state."""

    def __init__(self, R, L, dtau, num_layers, sizes):
        self.R, self.L, self.dtau = float(R), float(L), float(dtau)
        self.velocity = [np.zeros(n) for n in sizes]

    def update(self, k, theta, r_theta):
        new, v = step_inductive(theta, self.velocity[k], r_theta, self.R, self.L, self.dtau)
        self.velocity[k] = v
        return new, new - theta


class CurvaturePort:
    """Newton-type port.  ``hessians[k]`` is a matrix or ``theta -> matrix``.

    Constant Hessians are factorized once.  Steps where the Hessian is not
    SPD fall back to a resistive step and are counted in ``fallbacks``.
    """

    def __init__(self, eta, hessians):
        self.eta = float(eta)
        self.hessians = list(hessians)
        self.fallbacks = 0
        self._chol = {}
        for k, H in enumerate(self.hessians):
            if callable(H):
                continue
            H = np.atleast_2d(np.asarray(H, dtype=float))
            try:
                c = np.linalg.cholesky(H)
            except np.linalg.LinAlgError:
                continue
            if np.allclose(H, H.T) and np.min(np.abs(np.diag(c))) ** 2 >= EIG_FLOOR:
                self._chol[k] = c

    def update(self, k, theta, r_theta):
        c = self._chol.get(k)
        if c is not None:
            d = np.linalg.solve(c.T, np.linalg.solve(c, r_theta))
            new = theta - self.eta * d
            return new, new - theta
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", CurvatureFallbackWarning)
            new = step_curvature(theta, r_theta, self.hessians[k], self.eta)
        self.fallbacks += sum(issubclass(w.category, CurvatureFallbackWarning) for w in caught)
        return new, new - theta
