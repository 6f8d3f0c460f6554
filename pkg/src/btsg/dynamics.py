"""Normalized cart-pole equations of motion and fixed-step integrators.

State layout everywhere in this package: ``s = (x, v, theta, omega)`` with
``x`` cart position, ``v`` cart velocity, ``theta`` pole angle in radians
measured clockwise from upright, ``omega`` pole angular velocity. The angle is
kept unwrapped (no mod-2pi reduction); the model-based controller's reference
bookkeeping depends on the raw accumulated angle.

The closed-loop tick update is forward Euler with the tick period ``dt`` --
the per-tick displacement bound used by the safety argument is derived for
that scheme, so it is not interchangeable with a higher-order method. RK4
with the finer substep ``dtau`` exists for the shooting solver only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

X, V, THETA, OMEGA = 0, 1, 2, 3


@dataclass(frozen=True)
class SimParams:
    """Simulation constants: control bound, tick step, solver substep.

    ``v_max``/``omega_max`` describe the box the closed-loop state is assumed
    (and asserted by the harness) to stay inside; they are needed to evaluate
    the per-tick displacement bound.
    """

    u_max: float = 1.0
    dt: float = 0.01
    dtau: float = 0.001
    v_max: float | None = 10.0
    omega_max: float | None = 10.0

    def __post_init__(self):
        if self.u_max <= 0:
            raise ValueError("u_max must be positive")
        if not (0 < self.dtau <= self.dt):
            raise ValueError("need 0 < dtau <= dt")


def clamp_control(u, u_max):
    """Saturate a control command to [-u_max, u_max] (applied at the point of use)."""
    return min(max(u, -u_max), u_max)


def eval_dynamics(s, u):
    """Right-hand side (v, u, omega, -u*cos(theta) + sin(theta)).

    Accepts a length-4 array or a stacked (..., 4) array; ``u`` broadcasts
    against the leading shape. Saturation is the caller's duty.
    """
    s = np.asarray(s, dtype=float)
    ds = np.empty_like(s)
    th = s[..., THETA]
    ds[..., X] = s[..., V]
    ds[..., V] = u
    ds[..., THETA] = s[..., OMEGA]
    ds[..., OMEGA] = -u * np.cos(th) + np.sin(th)
    return ds


def step_euler(s, u, dt):
    """One forward-Euler step s + f(s, u) * dt.

    This exact scheme is the closed-loop execution model; the displacement
    bound of :func:`step_bound` is only valid for it.
    """
    s = np.asarray(s, dtype=float)
    return s + eval_dynamics(s, u) * dt


def step_rk4(s, u, dtau):
    """Classical fourth-order Runge-Kutta step holding u constant."""
    s = np.asarray(s, dtype=float)
    k1 = eval_dynamics(s, u)
    k2 = eval_dynamics(s + 0.5 * dtau * k1, u)
    k3 = eval_dynamics(s + 0.5 * dtau * k2, u)
    k4 = eval_dynamics(s + dtau * k3, u)
    return s + (dtau / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_bound(params: SimParams) -> float:
    """Upper bound d1 on the Euler per-tick displacement over the reachable box.

    Maximizes each derivative component independently over
    |v| <= v_max, |omega| <= omega_max, |u| <= u_max, |sin theta| <= 1:

        ||s' - s|| <= dt * sqrt(v_max^2 + u_max^2 + omega_max^2 + (u_max + 1)^2)

    Conservative by construction (the component maxima are not simultaneously
    attainable).
    """
    if params.v_max is None or params.omega_max is None:
        raise ValueError("reachable box (v_max, omega_max) is not configured")
    ub = params.u_max
    return params.dt * float(
        np.sqrt(params.v_max**2 + ub**2 + params.omega_max**2 + (ub + 1.0) ** 2)
    )


def pole_energy(s):
    """Energy-like invariant of the unforced pole subsystem: omega^2/2 + cos(theta)."""
    s = np.asarray(s, dtype=float)
    return 0.5 * s[..., OMEGA] ** 2 + np.cos(s[..., THETA])
