import numpy as np
import pytest

from btsg.trajopt import (
    NOMINAL_TAUF,
    Diverged,
    NoConvergence,
    OptimalTrajectory,
    ShootingGuess,
    TrajectoryDatabase,
    costate_dynamics,
    hamiltonian,
    optimal_control,
    random_walk_database,
    shoot,
    solve_bvp,
    solve_min_effort,
    solve_nominal,
)

S0 = np.array([0.0, 0.0, np.pi, 0.0])

# initial costate of the genuine free-final-time extremal (terminal control
# zero), used to exercise the 5-equation solver without a multistart hunt
FREE_TIME_GUESS = ShootingGuess(np.array([-0.0384, -0.3448, -1.0518, 0.3448]), 13.97)


@pytest.fixture(scope="module")
def nominal():
    return solve_nominal(seed=0)


@pytest.fixture(scope="module")
def free_time_extremal():
    return solve_bvp(S0, FREE_TIME_GUESS, 1e-3)


def test_hamiltonian_zero_everything():
    assert hamiltonian([0, 0, 0, 0], [0, 0, 0, 0], 0.0) == 0.0


def test_hamiltonian_direct_substitution():
    # lam = (0,0,0,1), u=1 at the origin: -1*(1-0) + 0 + 0 + 0 + 1 = 0
    assert hamiltonian([0, 0, 0, 0], [0, 0, 0, 1], 1.0) == pytest.approx(0.0)


def test_hamiltonian_parabola_argmin_matches_optimal_control():
    rng = np.random.default_rng(2)
    for _ in range(20):
        s = rng.uniform(-2, 2, 4)
        lam = rng.uniform(-3, 3, 4)
        grid = np.linspace(-6, 6, 4001)
        vals = np.array([hamiltonian(s, lam, u) for u in grid])
        u_star = optimal_control(lam, s[2])
        assert abs(grid[np.argmin(vals)] - u_star) <= (grid[1] - grid[0])


def test_optimal_control_trivials():
    assert optimal_control([0, 0, 0, 0], 0.7) == 0.0
    assert optimal_control([0, 0, 0, 2], 0.0) == pytest.approx(1.0)
    assert optimal_control([0, 3, 0, 0], 1.3) == pytest.approx(-1.5)


def test_stationarity_identity():
    # dH/du = -lw*cos(th) + lv + 2u vanishes at the optimal control
    rng = np.random.default_rng(3)
    for _ in range(1000):
        lam = rng.uniform(-10, 10, 4)
        th = rng.uniform(-2 * np.pi, 2 * np.pi)
        u = optimal_control(lam, th)
        assert abs(-lam[3] * np.cos(th) + lam[1] + 2 * u) < 1e-12


def test_costate_zero():
    assert np.allclose(costate_dynamics([1, 2, 3, 4], [0, 0, 0, 0], 0.5), 0.0)


def test_costate_direct_substitution():
    dlam = costate_dynamics([0, 0, 0, 0], [1, 0, 0, 2], 0.0)
    assert np.allclose(dlam, [0, -1, -2, 0])


def test_costate_is_negative_state_gradient_of_hamiltonian():
    rng = np.random.default_rng(4)
    h = 1e-5
    for _ in range(1000):
        s = rng.uniform(-3, 3, 4)
        lam = rng.uniform(-3, 3, 4)
        u = rng.uniform(-2, 2)
        grad = np.empty(4)
        for i in range(4):
            sp, sm = s.copy(), s.copy()
            sp[i] += h
            sm[i] -= h
            grad[i] = (hamiltonian(sp, lam, u) - hamiltonian(sm, lam, u)) / (2 * h)
        assert np.max(np.abs(costate_dynamics(s, lam, u) + grad)) < 1e-6


def test_shoot_zero_costate_misses_target():
    # u == 0 along the arc, so the pendulum never leaves hanging
    res = shoot(ShootingGuess(np.zeros(4), 10.0), S0, 1e-3)
    assert np.linalg.norm(res) > 0.1
    assert res[2] == pytest.approx(np.pi, abs=1e-6)


def test_shoot_diverges_on_huge_costate():
    with pytest.raises(Diverged):
        shoot(ShootingGuess(np.array([0.0, 0.0, 0.0, 1e5]), 15.0), S0, 1e-3)


def test_hamiltonian_constant_along_arc(nominal):
    h_along = hamiltonian(nominal.states, nominal.costates, nominal.controls)
    assert np.max(np.abs(h_along - h_along[0])) < 1e-6


def test_residual_small_at_converged_solution(nominal):
    res = shoot(ShootingGuess(nominal.costates[0], nominal.tauf), S0, 1e-3)
    assert np.max(np.abs(res[:4])) < 1e-8


def test_free_time_extremal_satisfies_all_five(free_time_extremal):
    assert np.max(np.abs(free_time_extremal.residual)) < 1e-8
    h_along = hamiltonian(
        free_time_extremal.states, free_time_extremal.costates, free_time_extremal.controls
    )
    assert np.max(np.abs(h_along)) < 1e-6


def test_solve_bvp_restart_from_solution_is_a_fixed_point(free_time_extremal):
    again = solve_bvp(
        S0,
        ShootingGuess(free_time_extremal.costates[0], free_time_extremal.tauf),
        1e-3,
    )
    assert again.newton_iters <= 2
    assert again.tauf == pytest.approx(free_time_extremal.tauf, abs=1e-12)


def test_nominal_matches_published_benchmark(nominal):
    assert nominal.tauf == pytest.approx(NOMINAL_TAUF, rel=0.01)
    assert nominal.impulse == pytest.approx(3.696, rel=0.01)
    assert np.max(np.abs(nominal.states[-1])) < 1e-6
    assert np.abs(nominal.controls).max() <= 1.0  # within the actuator bound


def test_nominal_restart_is_cheap(nominal):
    again = solve_min_effort(S0, nominal.tauf, nominal.costates[0], 1e-3)
    assert again.newton_iters <= 2


def test_cost_requadrature_from_samples(nominal):
    cost = float(np.trapezoid(nominal.controls**2, nominal.tau))
    impulse = float(np.trapezoid(np.abs(nominal.controls), nominal.tau))
    assert cost == pytest.approx(nominal.cost, abs=1e-6)
    assert impulse == pytest.approx(nominal.impulse, abs=1e-6)


def test_stored_controls_consistent_with_costates(nominal):
    expect = optimal_control(nominal.costates, nominal.states[:, 2])
    assert np.max(np.abs(expect - nominal.controls)) < 1e-9


def test_trajectory_tau_strictly_increasing(nominal):
    assert nominal.tau[0] == 0.0
    assert nominal.tau[-1] == pytest.approx(nominal.tauf)
    assert np.all(np.diff(nominal.tau) > 0)


def test_database_no_walks_is_nominal_only(nominal):
    db = random_walk_database(nominal, n_walks=0, rng_seed=5)
    assert set(np.unique(db.traj_id)) == {0}
    sel = np.arange(0, nominal.n_samples, 10)
    sel = np.append(sel, nominal.n_samples - 1)
    assert np.array_equal(db.states, nominal.states[sel])
    assert db.solve_attempts == 0


def test_database_determinism(nominal, tmp_path):
    a = random_walk_database(nominal, n_walks=15, rng_seed=9)
    b = random_walk_database(nominal, n_walks=15, rng_seed=9)
    pa, pb = tmp_path / "a.db", tmp_path / "b.db"
    a.save_text(pa)
    b.save_text(pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_database_walks_desk_smoke(nominal):
    db = random_walk_database(nominal, n_walks=60, perturb_scale=0.05, rng_seed=1)
    assert db.success_rate >= 0.8
    assert db.n_records >= 10_000
    assert np.abs(db.controls).max() <= db.u_max
    assert not np.any(np.isnan(db.states))


def test_database_text_roundtrip(nominal, tmp_path):
    db = random_walk_database(nominal, n_walks=5, rng_seed=3)
    path = tmp_path / "db.txt"
    db.save_text(path)
    loaded = TrajectoryDatabase.load_text(path)
    assert np.array_equal(loaded.traj_id, db.traj_id)
    assert np.array_equal(loaded.states, db.states)
    assert np.array_equal(loaded.controls, db.controls)
    assert loaded.u_max == db.u_max and loaded.seed == db.seed


def test_database_binary_roundtrip(nominal, tmp_path):
    db = random_walk_database(nominal, n_walks=5, rng_seed=3)
    path = tmp_path / "db.bin"
    db.save_binary(path)
    loaded = TrajectoryDatabase.load_binary(path)
    assert np.array_equal(loaded.states, db.states)
    assert np.array_equal(loaded.controls, db.controls)


def test_database_binary_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTDB" + b"\x00" * 64)
    with pytest.raises(ValueError):
        TrajectoryDatabase.load_binary(path)


def test_database_text_bad_header(tmp_path):
    path = tmp_path / "junk.txt"
    path.write_text("something else entirely\n")
    with pytest.raises(ValueError):
        TrajectoryDatabase.load_text(path)


def test_solve_min_effort_rejects_bad_horizon():
    with pytest.raises(ValueError):
        solve_min_effort(S0, -1.0, np.zeros(4), 1e-3)


def test_no_convergence_reports_best_residual():
    # a horizon far too short to reach the target from hanging
    with pytest.raises(NoConvergence) as exc:
        solve_min_effort(S0, 0.2, np.zeros(4), 1e-3, max_iter=5)
    assert np.isfinite(exc.value.best_residual)
