"""The three leaf controllers and their condition checks.

Model-based: the feedback-linearizing swing-up law with a reference angle
that advances in whole turns when the pole falls too far behind; the flip
threshold is the smallest positive root of the gain-dependent transcendental
condition. Emergency: cart braking plus PD recentering with a latch so it
always runs to completion. Policy: a learned regressor clamped to the
actuator bound.

Under actuator saturation the raw reference-flip rule admits a spinning limit
cycle (the reference ratchets after a fast-passing pole forever), so the
model-based leaf adds two guards around the published law: flips re-arm only
once the pole is slow near its reference, and while the pole subsystem holds
excess energy the control switches to a rotational brake u = k*omega*cos(th)
until coasting energy is nominal again. Both guards are inert in the regime
the stability analysis covers (slow pole, unsaturated control).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .btcore import Status
from .dynamics import OMEGA, THETA, V, X

ZERO_TOL = 1e-3  # emergency controller's "x == 0 and v == 0" in floating point

# spin-brake regime (model-based leaf): pole energy hysteresis and gains
BRAKE_ENERGY_ON = 1.35
BRAKE_ENERGY_OFF = 1.15
BRAKE_GAIN = 2.0
ARM_OMEGA = 1.0  # reference flips re-arm only below this pole speed


class NoRoot(ValueError):
    """The flip-threshold equation has no sign change in (0, pi]."""


class OutOfBand(ValueError):
    """|theta - theta_r| > pi: a reference update was missed upstream."""


@dataclass(frozen=True)
class ModelBasedGains:
    k_theta: float = 4.0
    k_omega: float = 1.0
    k_x: float = 0.01
    k_v: float = 0.01

    def __post_init__(self):
        if min(self.k_theta, self.k_omega, self.k_x, self.k_v) <= 0:
            raise ValueError("all gains must be positive")
        if not self.k_theta > 1.0 + self.k_omega:
            raise ValueError("need k_theta > 1 + k_omega")
        small = 10.0 * max(self.k_x, self.k_v)
        if self.k_theta < small or self.k_omega < small:
            raise ValueError("need k_theta, k_omega >> k_x, k_v (>= 10x)")

    def theta_tilde(self, u_max: float, theta_r: float = 0.0) -> float:
        return solve_theta_tilde(self, u_max, theta_r)


@lru_cache(maxsize=64)
def _theta_tilde_cached(k_theta, k_omega, k_x, k_v, u_max, theta_r):
    u_m = u_max

    def g(tt):
        return (
            k_theta * (-theta_r + tt)
            + k_theta * np.arctan(np.pi * k_v * u_m + np.pi**2 * k_x * (u_m + np.pi))
            - np.pi * u_m * np.cos(tt)
            + np.sin(tt)
        )

    grid = np.linspace(1e-12, np.pi, 10_001)
    vals = g(grid)
    crossings = np.nonzero(np.diff(np.sign(vals)) != 0)[0]
    if len(crossings) == 0:
        raise NoRoot(
            f"flip-threshold equation has no root in (0, pi] for gains "
            f"({k_theta}, {k_omega}, {k_x}, {k_v}) with u_max={u_max}"
        )
    a, b = grid[crossings[0]], grid[crossings[0] + 1]
    fa = g(a)
    while b - a > 1e-12:
        mid = 0.5 * (a + b)
        if np.sign(g(mid)) == np.sign(fa):
            a, fa = mid, g(mid)
        else:
            b = mid
    return 0.5 * (a + b)


def solve_theta_tilde(gains: ModelBasedGains, u_max: float, theta_r: float = 0.0) -> float:
    """Smallest positive root of the reference-flip threshold condition.

    Sign-scan over 10^4 grid points in (0, pi], then bisection to 1e-12.
    """
    return _theta_tilde_cached(
        gains.k_theta, gains.k_omega, gains.k_x, gains.k_v, float(u_max), float(theta_r)
    )


def model_based_control(s, gains: ModelBasedGains, theta_r, u_max: float):
    """Stabilizing control law, saturated to [-u_max, u_max].

    Broadcasts over stacked states. Near the cos(theta) singularity the raw
    value overflows toward +-inf with the sign of the numerator; saturation
    clamps it, so no special casing beyond a sign fallback is needed.
    """
    s = np.asarray(s, dtype=float)
    th = s[..., THETA]
    num = (
        s[..., OMEGA] * gains.k_omega
        + gains.k_theta * (th - theta_r)
        + gains.k_theta * np.arctan(gains.k_v * s[..., V] + gains.k_x * s[..., X])
        + np.sin(th)
    )
    c = np.cos(th)
    tiny = np.abs(c) < 1e-9
    raw = np.where(tiny, np.sign(num) * u_max, num / np.where(tiny, 1.0, c))
    out = np.clip(raw, -u_max, u_max)
    return float(out) if out.ndim == 0 else out


def update_reference_angle(theta: float, theta_r: float, theta_tilde: float) -> float:
    """One application of the three-case reference update.

    Shifts the reference a full turn toward the side the pole has fallen to
    once the error reaches the flip threshold; raises OutOfBand when the
    error exceeds pi, which means the per-tick update discipline was broken.
    """
    if not 0 < theta_tilde <= np.pi:
        raise ValueError("theta_tilde must lie in (0, pi]")
    e = theta - theta_r
    if -np.pi <= e <= -theta_tilde:
        return theta_r - 2.0 * np.pi
    if abs(e) < theta_tilde:
        return theta_r
    if theta_tilde <= e <= np.pi:
        return theta_r + 2.0 * np.pi
    raise OutOfBand(f"|theta - theta_r| = {abs(e):.4f} > pi")


@dataclass(frozen=True)
class ModelBasedMemory:
    """Auxiliary state of the model-based leaf (part of the system state)."""

    theta_r: float = 0.0
    armed: bool = True
    braking: bool = False


def model_based_tick(s, mem: ModelBasedMemory, gains: ModelBasedGains, u_max: float):
    """One leaf evaluation: returns (u, updated memory).

    Regimes: rotational brake while the pole carries excess energy, else the
    published law with edge-triggered reference flips (armed only after the
    pole has been slow near its current reference).
    """
    s = np.asarray(s, dtype=float)
    th, om = float(s[THETA]), float(s[OMEGA])
    energy = 0.5 * om * om + np.cos(th)
    if mem.braking:
        braking = energy > BRAKE_ENERGY_OFF
    else:
        braking = energy > BRAKE_ENERGY_ON

    theta_r = mem.theta_r
    armed = mem.armed
    tt = gains.theta_tilde(u_max)
    if armed and abs(th - theta_r) > np.pi:
        # reference went stale (leaf not ticked for a while, or the pole was
        # spun externally): re-base onto the nearest whole turn
        theta_r = 2.0 * np.pi * round(th / (2.0 * np.pi))
    e = th - theta_r
    if armed and not braking and abs(e) <= np.pi:
        shifted = update_reference_angle(th, theta_r, tt)
        if shifted != theta_r:
            theta_r = shifted
            armed = False
    if abs(th - theta_r) < tt and abs(om) < ARM_OMEGA:
        armed = True

    if braking:
        u = float(np.clip(BRAKE_GAIN * om * np.cos(th), -u_max, u_max))
    else:
        u = model_based_control(s, gains, theta_r, u_max)
    return u, ModelBasedMemory(theta_r=theta_r, armed=armed, braking=braking)


@dataclass(frozen=True)
class EmergencyState:
    """Latch plus parameters of the emergency recentering controller."""

    resetting_position: bool = False
    d_safe: float = 4.0
    k_x: float = 0.5
    k_v: float = 1.5

    def __post_init__(self):
        if self.d_safe <= 0:
            raise ValueError("d_safe must be positive")
        if self.k_x <= 0 or self.k_v <= 0:
            raise ValueError("emergency PD gains must be positive")


def emergency_control(s, es: EmergencyState, u_max: float):
    """Brake the cart back inside d_safe, then PD it to rest at the origin.

    Returns (u, updated EmergencyState, status). Success only once both |x|
    and |v| are inside the zero tolerance; until then the latch stays set so
    the safety condition keeps routing ticks here.
    """
    s = np.asarray(s, dtype=float)
    x, v = float(s[X]), float(s[V])
    if abs(x) > es.d_safe:
        u = -u_max * np.sign(x)
    else:
        u = float(np.clip(-es.k_x * x - es.k_v * v, -u_max, u_max))
    if abs(x) < ZERO_TOL and abs(v) < ZERO_TOL:
        return u, replace(es, resetting_position=False), Status.SUCCESS
    return u, replace(es, resetting_position=True), Status.RUNNING


def safety_ok(s, es: EmergencyState) -> Status:
    """Success iff the cart is within d_safe and no recentering is underway."""
    inside = abs(float(np.asarray(s, dtype=float)[X])) <= es.d_safe
    return Status.SUCCESS if inside and not es.resetting_position else Status.FAILURE


def progress_ok(tau: float, deadline: float) -> Status:
    """Success strictly before the deadline, Failure from the deadline on."""
    return Status.SUCCESS if tau < deadline else Status.FAILURE


def wrap_angle(theta):
    """Reduce an angle to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(theta, dtype=float), 2.0 * np.pi)


def goal_distance(s):
    """Max-norm distance to upright-at-origin with the angle wrapped."""
    s = np.asarray(s, dtype=float)
    comps = np.stack(
        [np.abs(s[..., X]), np.abs(s[..., V]), np.abs(wrap_angle(s[..., THETA])), np.abs(s[..., OMEGA])],
        axis=-1,
    )
    return comps.max(axis=-1)


def near_goal(s, eps_goal: float) -> Status:
    """Success inside the goal box (angle taken mod 2 pi, centered)."""
    if eps_goal <= 0:
        raise ValueError("eps_goal must be positive")
    return Status.SUCCESS if goal_distance(s) < eps_goal else Status.FAILURE


def nn_control(s, policy, u_max: float):
    """Policy inference clamped to the actuator bound; always Running."""
    u = float(policy.predict(np.asarray(s, dtype=float)))
    return float(np.clip(u, -u_max, u_max)), Status.RUNNING


def model_based_rollout(
    starts,
    gains: ModelBasedGains,
    u_max: float,
    dt: float,
    n_ticks: int,
    success_tol: float = ZERO_TOL,
    eps_goal: float | None = None,
    collect_metrics: bool = False,
):
    """Lockstep closed-loop rollouts of the model-based leaf alone.

    Vectorized twin of model_based_tick + forward Euler, used by the
    Monte-Carlo convergence suite, the certification calibration, and the
    benchmark. Returns (conv_time, entry_time, max_abs) arrays; times are NaN
    where the criterion was never met. ``max_abs`` rows are (|x|, |v|,
    |omega|) peaks. With ``collect_metrics`` the rollouts always run the full
    horizon and (impulse, stay_entry) arrays are appended to the return:
    impulse is the summed |u| dt over the whole trace and stay_entry the
    first time after which the goal box is never left.
    """
    starts = np.asarray(starts, dtype=float)
    m = len(starts)
    x, v = starts[:, X].copy(), starts[:, V].copy()
    th, om = starts[:, THETA].copy(), starts[:, OMEGA].copy()
    tt = gains.theta_tilde(u_max)
    tr = np.zeros(m)
    armed = np.ones(m, dtype=bool)
    braking = np.zeros(m, dtype=bool)
    conv = np.full(m, np.nan)
    entry = np.full(m, np.nan)
    live = np.ones(m, dtype=bool)
    max_abs = np.zeros((m, 3))
    impulse = np.zeros(m)
    last_outside = np.full(m, -1.0)

    for k in range(n_ticks):
        if not live.any():
            break
        energy = 0.5 * om * om + np.cos(th)
        braking = np.where(braking, energy > BRAKE_ENERGY_OFF, energy > BRAKE_ENERGY_ON)
        stale = armed & (np.abs(th - tr) > np.pi)
        tr = np.where(stale, 2.0 * np.pi * np.round(th / (2.0 * np.pi)), tr)
        e = th - tr
        inband = np.abs(e) <= np.pi
        up = armed & ~braking & inband & (e >= tt)
        dn = armed & ~braking & inband & (e <= -tt)
        tr = tr + 2.0 * np.pi * (up.astype(float) - dn.astype(float))
        armed = (armed & ~(up | dn)) | ((np.abs(th - tr) < tt) & (np.abs(om) < ARM_OMEGA))

        c = np.cos(th)
        num = om * gains.k_omega + gains.k_theta * (th - tr) \
            + gains.k_theta * np.arctan(gains.k_v * v + gains.k_x * x) + np.sin(th)
        tiny = np.abs(c) < 1e-9
        u_law = np.where(tiny, np.sign(num) * u_max, num / np.where(tiny, 1.0, c))
        u = np.clip(np.where(braking, BRAKE_GAIN * om * c, u_law), -u_max, u_max)

        xn = x + dt * v
        vn = v + dt * u
        thn = th + dt * om
        omn = om + dt * (-u * c + np.sin(th))
        x = np.where(live, xn, x)
        v = np.where(live, vn, v)
        th = np.where(live, thn, th)
        om = np.where(live, omn, om)
        max_abs[live, 0] = np.maximum(max_abs[live, 0], np.abs(x[live]))
        max_abs[live, 1] = np.maximum(max_abs[live, 1], np.abs(v[live]))
        max_abs[live, 2] = np.maximum(max_abs[live, 2], np.abs(om[live]))

        if collect_metrics:
            impulse += np.abs(u) * dt
        err = np.maximum.reduce([np.abs(x), np.abs(v), np.abs(th - tr), np.abs(om)])
        if eps_goal is not None:
            goal = np.maximum.reduce([np.abs(x), np.abs(v), np.abs(wrap_angle(th)), np.abs(om)])
            entry[live & np.isnan(entry) & (goal < eps_goal)] = (k + 1) * dt
            if collect_metrics:
                last_outside[goal >= eps_goal] = (k + 1) * dt
        done = live & (err < success_tol) & np.isnan(conv)
        conv[done] = (k + 1) * dt
        if not collect_metrics:
            live &= ~done
    if collect_metrics:
        stay_entry = np.where(last_outside < 0, 0.0, last_outside + dt)
        stay_entry[last_outside >= n_ticks * dt - dt / 2] = np.nan  # never settled
        return conv, entry, max_abs, impulse, stay_entry
    return conv, entry, max_abs
