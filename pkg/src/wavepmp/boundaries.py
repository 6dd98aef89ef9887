"""Scattering-form terminations at the input (k = 0) and output (k = N) ports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import SQRT2, MetricFactor


def input_scatter(w_minus_0, theta_0: MetricFactor, x_in):
    """Outgoing ``w_plus_0`` that clamps the reconstructed state to ``x_in``."""
    return SQRT2 * theta_0.apply(np.asarray(x_in, dtype=float)) - np.asarray(w_minus_0, dtype=float)


def terminal_scatter(w_plus_N, theta_N: MetricFactor, grad_loss):
    """Outgoing ``w_minus_N`` that clamps the reconstructed costate to ``grad_loss``."""
    return np.asarray(w_plus_N, dtype=float) - SQRT2 * theta_N.apply_inv_t(np.asarray(grad_loss, dtype=float))


@dataclass
class PortReport:
    input_margin: float   # |w-(0)| - |w+(0)|, >= 0 when passive
    terminal_margin: float  # |w+(N)| - |w-(N)|, >= 0 when passive
    input_passive: bool
    terminal_passive: bool

    @property
    def passive(self) -> bool:
        return self.input_passive and self.terminal_passive


def boundary_passivity_report(field, atol=1e-12) -> PortReport:
    """Check ``|w+(0)| <= |w-(0)|`` and ``|w-(N)| <= |w+(N)|`` on a field."""
    in_margin = float(np.linalg.norm(field.w_minus[0]) - np.linalg.norm(field.w_plus[0]))
    out_margin = float(np.linalg.norm(field.w_plus[-1]) - np.linalg.norm(field.w_minus[-1]))
    return PortReport(in_margin, out_margin, in_margin >= -atol, out_margin >= -atol)
