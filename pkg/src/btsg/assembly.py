"""BT123 assembly: conditions and controller leaves wired per the switching
design (safety first, then timeout, then near-goal, else the learned policy),
plus the region constructions and the Monte-Carlo certification runs.

The extended system state carries the physical 4-state, the mission clock,
and all leaf memory (reference-angle bookkeeping, emergency latch), so the
assembled tree is a pure {f, r, dt} tuple and every rollout replays exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import controllers as ctl
from .btcore import BehaviorTree, Status, action, condition, fallback, sequence
from .controllers import (
    EmergencyState,
    ModelBasedGains,
    ModelBasedMemory,
    emergency_control,
    goal_distance,
    model_based_tick,
    near_goal,
    nn_control,
    progress_ok,
    safety_ok,
)
from .dynamics import SimParams, step_bound, step_euler

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def deco(fn):
            return fn

        return deco

# reachable box asserted during certification (configurable via SimParams)
BOX_V_MAX = 12.0
BOX_OMEGA_MAX = 10.0

CONFIG_KEYS = (
    "u_max",
    "dt",
    "d_safe",
    "dsafe_mode",
    "T",
    "eps_goal",
    "k_theta",
    "k_omega",
    "k_x",
    "k_v",
    "weights_path",
    "seed",
)


class ConfigInvalid(ValueError):
    pass


def certified_d_safe(u_max: float) -> float:
    """Conservative safety radius pi^2 (pi + u_max)."""
    return math.pi**2 * (math.pi + u_max)


@dataclass(frozen=True)
class Bt123Config:
    u_max: float = 2.5
    dt: float = 0.01
    d_safe: float = 4.0
    dsafe_mode: str = "experimental"
    T: float = 10.0
    eps_goal: float = 0.15
    gains: ModelBasedGains = field(default_factory=ModelBasedGains)
    weights_path: str | None = None
    seed: int = 0
    v_max: float = BOX_V_MAX
    omega_max: float = BOX_OMEGA_MAX

    def __post_init__(self):
        if self.u_max <= 0 or self.dt <= 0 or self.T <= 0 or self.eps_goal <= 0:
            raise ConfigInvalid("u_max, dt, T, eps_goal must all be positive")
        if self.d_safe <= 0:
            raise ConfigInvalid("d_safe must be positive")
        if self.dsafe_mode == "certified":
            need = certified_d_safe(self.u_max)
            if self.d_safe < need - 1e-9:
                raise ConfigInvalid(
                    f"certified mode needs d_safe >= pi^2(pi + u_max) = {need:.3f}, "
                    f"got {self.d_safe}"
                )
        elif self.dsafe_mode != "experimental":
            raise ConfigInvalid(f"dsafe_mode must be certified|experimental, got {self.dsafe_mode!r}")

    @property
    def d1(self) -> float:
        return step_bound(
            SimParams(u_max=self.u_max, dt=self.dt, v_max=self.v_max, omega_max=self.omega_max)
        )

    def theta_tilde(self) -> float:
        return self.gains.theta_tilde(self.u_max)


def certified_config(**overrides) -> Bt123Config:
    """Config in certified mode with the conservative d_safe for its u_max."""
    u_max = overrides.pop("u_max", 2.5)
    d_safe = overrides.pop("d_safe", certified_d_safe(u_max))
    return Bt123Config(u_max=u_max, d_safe=d_safe, dsafe_mode="certified", **overrides)


def load_config(path) -> Bt123Config:
    """Parse the flat `key = value` run configuration.

    Unknown keys are errors; missing keys fall back to defaults.
    """
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigInvalid(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise ConfigInvalid(f"{path}:{lineno}: unknown key {key!r}")
            if key in raw:
                raise ConfigInvalid(f"{path}:{lineno}: duplicate key {key!r}")
            raw[key] = value
    kwargs = {}
    for key in ("u_max", "dt", "d_safe", "T", "eps_goal"):
        if key in raw:
            kwargs[key] = float(raw.pop(key))
    gain_kwargs = {}
    for key, attr in (("k_theta", "k_theta"), ("k_omega", "k_omega"), ("k_x", "k_x"), ("k_v", "k_v")):
        if key in raw:
            gain_kwargs[attr] = float(raw.pop(key))
    if gain_kwargs:
        kwargs["gains"] = ModelBasedGains(**{**ModelBasedGains().__dict__, **gain_kwargs})
    if "dsafe_mode" in raw:
        kwargs["dsafe_mode"] = raw.pop("dsafe_mode")
    if "weights_path" in raw:
        kwargs["weights_path"] = raw.pop("weights_path")
    if "seed" in raw:
        kwargs["seed"] = int(raw.pop("seed"))
    return Bt123Config(**kwargs)


def save_config(cfg: Bt123Config, path):
    with open(path, "w") as fh:
        fh.write(f"u_max = {cfg.u_max}\n")
        fh.write(f"dt = {cfg.dt}\n")
        fh.write(f"d_safe = {cfg.d_safe}\n")
        fh.write(f"dsafe_mode = {cfg.dsafe_mode}\n")
        fh.write(f"T = {cfg.T}\n")
        fh.write(f"eps_goal = {cfg.eps_goal}\n")
        fh.write(f"k_theta = {cfg.gains.k_theta}\n")
        fh.write(f"k_omega = {cfg.gains.k_omega}\n")
        fh.write(f"k_x = {cfg.gains.k_x}\n")
        fh.write(f"k_v = {cfg.gains.k_v}\n")
        if cfg.weights_path is not None:
            fh.write(f"weights_path = {cfg.weights_path}\n")
        fh.write(f"seed = {cfg.seed}\n")


@dataclass(frozen=True)
class SystemState:
    """Extended state ticked by BT123: physics plus clock plus leaf memory.

    ``u`` is the control applied in the transition that produced this state
    (NaN at the start of a rollout).
    """

    s: np.ndarray
    tau: float = 0.0
    mb: ModelBasedMemory = field(default_factory=ModelBasedMemory)
    em_resetting: bool = False
    u: float = float("nan")

    def row_header(self):
        return ["x", "v", "theta", "omega", "u"]

    def as_row(self):
        return (*self.s, self.u)

    def aux_header(self):
        return ["theta_r", "armed", "braking", "resetting"]

    def aux_row(self):
        return (self.mb.theta_r, int(self.mb.armed), int(self.mb.braking), int(self.em_resetting))


def initial_state(s0) -> SystemState:
    return SystemState(s=np.asarray(s0, dtype=float).reshape(4))


@dataclass(frozen=True)
class RegionMonitor:
    """The cart-position region constructions used by the safety argument."""

    d_safe: float
    d1: float

    @property
    def obstacle_radius(self) -> float:
        return 3.0 * self.d_safe + self.d1

    def in_s1(self, x) -> bool:
        return abs(float(x)) <= self.d_safe

    def in_i1(self, x) -> bool:
        return self.d_safe < abs(float(x)) < self.d_safe + self.d1

    def in_o1(self, x) -> bool:
        return abs(float(x)) > self.obstacle_radius


def _emergency_params(cfg: Bt123Config, state: SystemState) -> EmergencyState:
    return EmergencyState(resetting_position=state.em_resetting, d_safe=cfg.d_safe)


def build_bt123(cfg: Bt123Config, policy) -> BehaviorTree:
    """Assemble Fallback( Sequence(SafetyOK, Fallback( Sequence(ProgressOK,
    NotNearGoal, Policy), ModelBased )), Emergency ) over SystemState.

    The near-goal check is inverted inside the sequence so that reaching the
    goal neighbourhood routes ticks to the model-based controller, which then
    owns the terminal phase.
    """
    if policy is None:
        raise ConfigInvalid("bt123 needs a policy (weights_path unset and no policy given)")
    dt = cfg.dt

    def nn_update(st: SystemState) -> SystemState:
        u, _ = nn_control(st.s, policy, cfg.u_max)
        return replace(st, s=step_euler(st.s, u, dt), tau=st.tau + dt, u=u)

    def mb_update(st: SystemState) -> SystemState:
        u, mem = model_based_tick(st.s, st.mb, cfg.gains, cfg.u_max)
        return replace(st, s=step_euler(st.s, u, dt), tau=st.tau + dt, mb=mem, u=u)

    def em_update(st: SystemState) -> SystemState:
        u, es, _ = emergency_control(st.s, _emergency_params(cfg, st), cfg.u_max)
        return replace(
            st, s=step_euler(st.s, u, dt), tau=st.tau + dt,
            em_resetting=es.resetting_position, u=u,
        )

    def em_status(st: SystemState) -> Status:
        _, _, status = emergency_control(st.s, _emergency_params(cfg, st), cfg.u_max)
        return status

    nn_leaf = action("nn_policy", nn_update, lambda st: Status.RUNNING, dt)
    mb_leaf = action("model_based", mb_update, lambda st: Status.RUNNING, dt)
    em_leaf = action("emergency", em_update, em_status, dt)

    safety = condition(
        "safety_ok",
        lambda st: safety_ok(st.s, _emergency_params(cfg, st)) == Status.SUCCESS,
        dt,
    )
    progress = condition("progress_ok", lambda st: progress_ok(st.tau, cfg.T) == Status.SUCCESS, dt)
    not_near = condition(
        "not_near_goal", lambda st: near_goal(st.s, cfg.eps_goal) != Status.SUCCESS, dt
    )

    return fallback(
        sequence(safety, fallback(sequence(progress, not_near, nn_leaf), mb_leaf)),
        em_leaf,
    )


def condition_flags(cfg: Bt123Config, st: SystemState):
    """The three condition-node verdicts at a state (for trace explanations)."""
    return {
        "safety_ok": safety_ok(st.s, _emergency_params(cfg, st)) == Status.SUCCESS,
        "progress_ok": progress_ok(st.tau, cfg.T) == Status.SUCCESS,
        "near_goal": near_goal(st.s, cfg.eps_goal) == Status.SUCCESS,
    }


# ---------------------------------------------------------------------------
# Certification: Monte-Carlo safety + finite-time-success over starts in I1.
# Rollouts use a compiled kernel that mirrors build_bt123 tick-for-tick (the
# equivalence is itself under test); the tree path would take tens of minutes
# for 200 certification rollouts.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _policy_eval(x, v, th, om, w1, b1, w2, b2, w3, b3, mean, std):
    f = np.empty(6)
    f[0] = x
    f[1] = v
    f[2] = th
    f[3] = om
    f[4] = np.sin(th)
    f[5] = np.cos(th)
    for i in range(6):
        f[i] = (f[i] - mean[i]) / std[i]
    h1 = np.tanh(w1 @ f + b1)
    h2 = np.tanh(w2 @ h1 + b2)
    return (w3 @ h2 + b3)[0]


@njit(cache=True)
def _bt123_rollout_kernel(
    s0,
    max_ticks,
    dt,
    u_max,
    d_safe,
    big_t,
    eps_goal,
    kt,
    kw,
    kx,
    kv,
    tt,
    em_kx,
    em_kv,
    zero_tol,
    e_on,
    e_off,
    k_brake,
    arm_omega,
    w1,
    b1,
    w2,
    b2,
    w3,
    b3,
    mean,
    std,
):
    """BT123 closed loop; returns (entry_tick, max_step, max_absx, max_absv,
    max_absw, final_state). entry_tick is -1 if the goal box was never hit."""
    x, v, th, om = s0[0], s0[1], s0[2], s0[3]
    tau = 0.0
    theta_r = 0.0
    armed = True
    braking = False
    em_latch = False
    entry = -1
    max_step = 0.0
    max_absx = abs(x)
    max_absv = abs(v)
    max_absw = abs(om)
    two_pi = 2.0 * np.pi

    for k in range(max_ticks):
        # goal check on the current state
        thw = th - two_pi * np.round(th / two_pi)
        gd = max(max(abs(x), abs(v)), max(abs(thw), abs(om)))
        if gd < eps_goal and entry < 0:
            entry = k
            break

        safety = (abs(x) <= d_safe) and (not em_latch)
        if not safety:
            # emergency leaf
            if abs(x) > d_safe:
                u = -u_max if x > 0 else u_max
            else:
                u = -em_kx * x - em_kv * v
                if u > u_max:
                    u = u_max
                elif u < -u_max:
                    u = -u_max
            em_latch = not (abs(x) < zero_tol and abs(v) < zero_tol)
        elif tau < big_t and gd >= eps_goal:
            # policy leaf
            u = _policy_eval(x, v, th, om, w1, b1, w2, b2, w3, b3, mean, std)
            if u > u_max:
                u = u_max
            elif u < -u_max:
                u = -u_max
        else:
            # model-based leaf
            energy = 0.5 * om * om + np.cos(th)
            if braking:
                braking = energy > e_off
            else:
                braking = energy > e_on
            if armed and abs(th - theta_r) > np.pi:
                theta_r = two_pi * np.round(th / two_pi)
            e = th - theta_r
            if armed and (not braking) and abs(e) <= np.pi:
                if tt <= e <= np.pi:
                    theta_r += two_pi
                    armed = False
                elif -np.pi <= e <= -tt:
                    theta_r -= two_pi
                    armed = False
            if abs(th - theta_r) < tt and abs(om) < arm_omega:
                armed = True
            c = np.cos(th)
            if braking:
                u = k_brake * om * c
            else:
                num = om * kw + kt * (th - theta_r) + kt * np.arctan(kv * v + kx * x) + np.sin(th)
                if abs(c) < 1e-9:
                    u = np.sign(num) * u_max
                else:
                    u = num / c
            if u > u_max:
                u = u_max
            elif u < -u_max:
                u = -u_max

        c = np.cos(th)
        dx = dt * v
        dv = dt * u
        dth = dt * om
        dom = dt * (-u * c + np.sin(th))
        x += dx
        v += dv
        th += dth
        om += dom
        tau += dt
        step = np.sqrt(dx * dx + dv * dv + dth * dth + dom * dom)
        if step > max_step:
            max_step = step
        if abs(x) > max_absx:
            max_absx = abs(x)
        if abs(v) > max_absv:
            max_absv = abs(v)
        if abs(om) > max_absw:
            max_absw = abs(om)

    final = np.empty(4)
    final[0] = x
    final[1] = v
    final[2] = th
    final[3] = om
    return entry, max_step, max_absx, max_absv, max_absw, final


def _policy_arrays(policy):
    if len(policy.weights) != 3 or policy.n_inputs != 6:
        raise ValueError("certification kernel expects the 6-input, two-hidden-layer policy")
    w = [np.ascontiguousarray(a, dtype=np.float64) for a in policy.weights]
    b = [np.ascontiguousarray(a, dtype=np.float64) for a in policy.biases]
    return (
        w[0], b[0], w[1], b[1], w[2], b[2],
        np.ascontiguousarray(policy.norm_mean, dtype=np.float64),
        np.ascontiguousarray(policy.norm_std, dtype=np.float64),
    )


def bt123_rollout_fast(cfg: Bt123Config, policy, s0, max_ticks: int):
    """Compiled-equivalent rollout of build_bt123 from a raw 4-state.

    Returns (entry_tick or None, max_step, max_absx, max_absv, max_absw,
    final_state).
    """
    args = _policy_arrays(policy)
    entry, max_step, mx, mv, mw, final = _bt123_rollout_kernel(
        np.asarray(s0, dtype=float).reshape(4),
        int(max_ticks),
        cfg.dt,
        cfg.u_max,
        cfg.d_safe,
        cfg.T,
        cfg.eps_goal,
        cfg.gains.k_theta,
        cfg.gains.k_omega,
        cfg.gains.k_x,
        cfg.gains.k_v,
        cfg.theta_tilde(),
        0.5,
        1.5,
        ctl.ZERO_TOL,
        ctl.BRAKE_ENERGY_ON,
        ctl.BRAKE_ENERGY_OFF,
        ctl.BRAKE_GAIN,
        ctl.ARM_OMEGA,
        *args,
    )
    return (None if entry < 0 else int(entry)), max_step, mx, mv, mw, final


def sample_i1(rng, monitor: RegionMonitor, v_range=2.0, omega_range=2.0):
    """Draw a start in the initialization annulus; pole state moderate."""
    side = 1.0 if rng.random() < 0.5 else -1.0
    x = side * rng.uniform(monitor.d_safe, monitor.d_safe + monitor.d1)
    return np.array(
        [
            x,
            rng.uniform(-v_range, v_range),
            rng.uniform(-np.pi, np.pi),
            rng.uniform(-omega_range, omega_range),
        ]
    )


@dataclass
class CertificateReport:
    n_samples: int
    tau_bound: float
    allowance: float
    d1: float
    safety_violations: list = field(default_factory=list)
    fts_violations: list = field(default_factory=list)
    step_violations: list = field(default_factory=list)
    box_violations: list = field(default_factory=list)
    entry_times: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not (
            self.safety_violations
            or self.fts_violations
            or self.step_violations
            or self.box_violations
        )

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        if self.n_samples == 0:
            verdict += " [vacuous: no samples]"
        return (
            f"certificate: {self.n_samples} rollouts, tau_bound={self.tau_bound:.1f} "
            f"(allowance {self.allowance:.1f}), d1={self.d1:.4f} -> {verdict} "
            f"[safety {len(self.safety_violations)}, fts {len(self.fts_violations)}, "
            f"step {len(self.step_violations)}, box {len(self.box_violations)}]"
        )

    def to_text(self) -> str:
        lines = [self.summary()]
        for kind, items in (
            ("safety", self.safety_violations),
            ("fts", self.fts_violations),
            ("step", self.step_violations),
            ("box", self.box_violations),
        ):
            for idx, detail in items:
                lines.append(f"  {kind} violation on sample {idx}: {detail}")
        return "\n".join(lines) + "\n"


def calibrate_fts_allowance(cfg: Bt123Config, rng_seed: int, n_samples: int = 100) -> float:
    """Allowance = 1.5 x the 95th-percentile time the model-based controller
    alone needs to reach the goal box from its documented basin."""
    rng = np.random.default_rng((rng_seed, 0xCA11B))
    starts = np.column_stack(
        [
            rng.uniform(-2, 2, n_samples),
            rng.uniform(-0.5, 0.5, n_samples),
            rng.uniform(-np.pi, np.pi, n_samples),
            rng.uniform(-1, 1, n_samples),
        ]
    )
    budget = int(3000.0 / cfg.dt)
    _, entry, _ = ctl.model_based_rollout(
        starts, cfg.gains, cfg.u_max, cfg.dt, budget, eps_goal=cfg.eps_goal
    )
    if np.isnan(entry).any():
        raise RuntimeError("model-based calibration runs failed to reach the goal box")
    return 1.5 * float(np.percentile(entry, 95))


def certify(
    cfg: Bt123Config,
    policy,
    n_samples: int = 200,
    rng_seed: int = 0,
    obstacle_margin_check: float | None = None,
) -> CertificateReport:
    """Safety and finite-time-success certificate for the assembled tree.

    Rollouts start inside the initialization annulus I1. Checks per rollout:
    never past the obstacle radius 3 d_safe + d1, per-tick displacement never
    above d1, velocities inside the configured box, and goal-box entry no
    later than T plus the calibrated model-based allowance. Violations are
    reported, not raised. ``obstacle_margin_check`` overrides the obstacle
    radius (the self-consistency tripwire tests pass a deliberately small
    one).
    """
    if cfg.dsafe_mode != "certified":
        raise ConfigInvalid("certification requires a certified-mode configuration")
    monitor = RegionMonitor(d_safe=cfg.d_safe, d1=cfg.d1)
    allowance = calibrate_fts_allowance(cfg, rng_seed)
    tau_bound = cfg.T + allowance
    max_ticks = int(np.ceil(tau_bound / cfg.dt))
    obstacle_radius = (
        monitor.obstacle_radius if obstacle_margin_check is None else obstacle_margin_check
    )

    report = CertificateReport(
        n_samples=n_samples, tau_bound=tau_bound, allowance=allowance, d1=cfg.d1
    )
    for i in range(n_samples):
        rng = np.random.default_rng((rng_seed, i))
        s0 = sample_i1(rng, monitor)
        entry, max_step, mx, mv, mw, final = bt123_rollout_fast(cfg, policy, s0, max_ticks)
        if mx > obstacle_radius:
            report.safety_violations.append((i, f"|x| reached {mx:.3f} > {obstacle_radius:.3f}"))
        if max_step > cfg.d1 + 1e-12:
            report.step_violations.append((i, f"tick displacement {max_step:.5f} > d1 {cfg.d1:.5f}"))
        if mv > cfg.v_max or mw > cfg.omega_max:
            report.box_violations.append(
                (i, f"|v| peak {mv:.2f} (box {cfg.v_max}), |omega| peak {mw:.2f} (box {cfg.omega_max})")
            )
        if entry is None:
            report.fts_violations.append(
                (i, f"goal box not reached within tau_bound {tau_bound:.1f}")
            )
        else:
            report.entry_times.append(entry * cfg.dt)
    return report
