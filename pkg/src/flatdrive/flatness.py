"""Recovery of car-like robot states from flat outputs.

The planner works entirely in the flat-output space (the rear-axle position
``sigma = (x, y)`` and its time derivatives).  The full kinematic state of
the car -- heading, signed speed, accelerations, steering angle, curvature --
is an algebraic function of ``(sigma_dot, sigma_ddot)`` plus a per-segment
direction flag ``eta`` (+1 forward, -1 reverse).  The map is singular at zero
speed, so callers must not sample it at gear-shift instants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

# Below this flat speed the state map is undefined; sampling code must keep
# strictly away from gear-shift instants.
SPEED_EPS = 1e-6


class SingularSpeedError(ValueError):
    """Raised when the flat-to-state map is evaluated at near-zero speed."""

    def __init__(self, speed: float, t: float | None = None):
        self.speed = speed
        self.t = t
        where = "" if t is None else f" at t={t:.6g} s"
        super().__init__(f"flat speed {speed:.3e} below {SPEED_EPS}{where}")


@dataclass(frozen=True)
class KinematicParams:
    """Physical limits of one car-like robot.

    Attributes:
        wheelbase: distance between axles, meters.
        v_max: speed limit, m/s.
        a_max: acceleration limit, m/s^2.
        phi_max: steering-angle limit, radians, in (0, pi/2).
    """

    wheelbase: float
    v_max: float
    a_max: float
    phi_max: float

    def __post_init__(self) -> None:
        if self.wheelbase <= 0.0:
            raise ValueError("wheelbase must be positive")
        if self.v_max <= 0.0 or self.a_max <= 0.0:
            raise ValueError("v_max and a_max must be positive")
        if not 0.0 < self.phi_max < math.pi / 2:
            raise ValueError("phi_max must lie in (0, pi/2)")


@dataclass(frozen=True)
class CarState:
    """Recovered car state at one instant.

    ``v`` is signed (negative while reversing); ``a_t``/``a_n`` are the
    tangential and normal acceleration components; ``kappa`` is the signed
    path curvature satisfying ``kappa = tan(phi) / wheelbase``.
    """

    x: float
    y: float
    theta: float
    v: float
    a_t: float
    a_n: float
    phi: float
    kappa: float


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    theta = math.remainder(theta, 2.0 * math.pi)
    if theta <= -math.pi:
        theta += 2.0 * math.pi
    return theta


def flat_to_state(
    sigma,
    d1,
    d2,
    eta: int,
    params: KinematicParams,
    t: float | None = None,
) -> CarState:
    """Map flat output samples to a car state.

    Args:
        sigma: position, 2-vector.
        d1: first derivative of the flat output, 2-vector.
        d2: second derivative, 2-vector.
        eta: +1 for forward motion, -1 for reverse.
        params: robot parameters (wheelbase enters the steering formula).
        t: optional timestamp, only used to annotate errors.

    Raises:
        SingularSpeedError: if ``norm(d1) < SPEED_EPS``.
    """
    if eta not in (-1, 1):
        raise ValueError(f"eta must be +1 or -1, got {eta}")
    dx, dy = float(d1[0]), float(d1[1])
    ddx, ddy = float(d2[0]), float(d2[1])
    speed = math.hypot(dx, dy)
    if speed < SPEED_EPS:
        raise SingularSpeedError(speed, t)

    # +0.0 normalizes signed zeros so atan2 lands on the +pi branch.
    theta = math.atan2(eta * dy + 0.0, eta * dx + 0.0)
    cross = dx * ddy - dy * ddx
    dot = dx * ddx + dy * ddy
    v = eta * speed
    a_t = eta * dot / speed
    a_n = eta * cross / speed
    kappa = eta * cross / speed**3
    phi = math.atan(kappa * params.wheelbase)
    return CarState(
        x=float(sigma[0]),
        y=float(sigma[1]),
        theta=theta,
        v=v,
        a_t=a_t,
        a_n=a_n,
        phi=phi,
        kappa=kappa,
    )


def curvature_limit(params: KinematicParams) -> float:
    """Largest path curvature reachable with the steering limit."""
    return math.tan(params.phi_max) / params.wheelbase
