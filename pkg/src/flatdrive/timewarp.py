"""Bijective map between unconstrained "virtual" durations and real durations.

Segment durations must stay strictly positive during optimization.  Instead
of constraining them, the planner optimizes an unconstrained real ``tau`` per
segment and maps it through a C^1 diffeomorphism onto ``T > 0``:

    T = tau^2/2 + tau + 1          for tau > 0
    T = 2 / (tau^2 - 2*tau + 2)    for tau <= 0

Both branches meet at (tau=0, T=1) with unit slope, so gradients chain
through cleanly.
"""

from __future__ import annotations

import math

__all__ = ["real_time", "real_time_derivative", "virtual_time"]


def real_time(tau: float) -> float:
    """Map a virtual time to a strictly positive duration in seconds."""
    if tau > 0.0:
        return 0.5 * tau * tau + tau + 1.0
    return 2.0 / (tau * tau - 2.0 * tau + 2.0)


def real_time_derivative(tau: float) -> float:
    """dT/dtau of :func:`real_time`; strictly positive everywhere."""
    if tau > 0.0:
        return tau + 1.0
    den = tau * tau - 2.0 * tau + 2.0
    return 4.0 * (1.0 - tau) / (den * den)


def virtual_time(T: float) -> float:
    """Invert :func:`real_time` in closed form.

    Raises:
        ValueError: if ``T <= 0`` (no preimage exists).
    """
    if not T > 0.0:
        raise ValueError(f"duration must be positive, got {T}")
    if T >= 1.0:
        # tau^2/2 + tau + (1 - T) = 0, positive root
        return math.sqrt(2.0 * T - 1.0) - 1.0
    # (tau - 1)^2 + 1 = 2/T, branch with tau <= 0
    return 1.0 - math.sqrt(2.0 / T - 1.0)
