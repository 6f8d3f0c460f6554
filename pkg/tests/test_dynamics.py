import numpy as np
import pytest

from btsg.dynamics import (
    SimParams,
    clamp_control,
    eval_dynamics,
    pole_energy,
    step_bound,
    step_euler,
    step_rk4,
)


def test_eval_upright_equilibrium():
    assert np.allclose(eval_dynamics([0, 0, 0, 0], 0.0), [0, 0, 0, 0])


def test_eval_hanging_with_unit_control():
    # cos(pi) = -1, sin(pi) = 0
    ds = eval_dynamics([0, 0, np.pi, 0], 1.0)
    assert np.allclose(ds, [0, 1, 0, 1], atol=1e-15)


def test_eval_quarter_turn():
    ds = eval_dynamics([1, 2, np.pi / 2, 3], 0.5)
    assert np.allclose(ds, [2, 0.5, 3, 1.0], atol=1e-15)


def test_eval_broadcasts_over_stacked_states():
    states = np.array([[0, 0, 0, 0], [0, 0, np.pi, 0.0]])
    ds = eval_dynamics(states, np.array([0.0, 1.0]))
    assert ds.shape == (2, 4)
    assert np.allclose(ds[1], [0, 1, 0, 1], atol=1e-15)


def test_step_euler_fixed_point():
    assert np.allclose(step_euler([0, 0, 0, 0], 0.0, 0.01), [0, 0, 0, 0])


def test_step_euler_hanging():
    s1 = step_euler([0, 0, np.pi, 0], 1.0, 0.1)
    assert np.allclose(s1, [0, 0.1, np.pi, 0.1], atol=1e-15)


def test_step_euler_pure_drift():
    s1 = step_euler([0, 1, 0, 0], 0.0, 0.5)
    assert np.allclose(s1, [0.5, 1, 0, 0])


def test_step_rk4_equilibrium_fixed_point():
    for dtau in (0.5, 0.01, 1e-4):
        assert np.allclose(step_rk4([0, 0, 0, 0], 0.0, dtau), [0, 0, 0, 0])


def test_step_rk4_exact_on_linear_slice():
    # with theta = omega = 0 and u = 0 the flow is linear, so RK4 is exact
    assert np.allclose(step_rk4([0, 1, 0, 0], 0.0, 0.5), [0.5, 1, 0, 0])


def test_rk4_euler_first_order_agreement():
    s = np.array([0, 0, np.pi, 0.0])
    diff = np.linalg.norm(step_rk4(s, 0.0, 0.01) - step_euler(s, 0.0, 0.01))
    assert diff < 1e-3


def test_rk4_euler_scaling_exponent():
    rng = np.random.default_rng(0)
    states = rng.uniform(-1, 1, size=(100, 4))
    states[:, 2] = rng.uniform(-np.pi, np.pi, size=100)
    u = rng.uniform(-1, 1, size=100)
    norms = []
    taus = [1e-1, 1e-2, 1e-3]
    for dtau in taus:
        d = step_rk4(states, u, dtau) - step_euler(states, u, dtau)
        norms.append(np.linalg.norm(d, axis=1).mean())
    p01 = np.log(norms[0] / norms[1]) / np.log(taus[0] / taus[1])
    p12 = np.log(norms[1] / norms[2]) / np.log(taus[1] / taus[2])
    assert 1.8 < p01 < 2.2
    assert 1.8 < p12 < 2.2


def test_step_bound_reference_box():
    params = SimParams(u_max=1.0, dt=0.01, v_max=10.0, omega_max=10.0)
    d1 = step_bound(params)
    assert d1 == pytest.approx(0.01 * np.sqrt(205.0))
    assert d1 == pytest.approx(0.1432, abs=1e-4)


def test_step_bound_scales_with_dt():
    base = step_bound(SimParams(dt=0.01))
    assert step_bound(SimParams(dt=0.001)) == pytest.approx(base / 10)


def test_step_bound_gravity_only():
    # u_max -> 0 limit with a zero-velocity box leaves only the sin(theta) term
    params = SimParams(u_max=1e-12, dt=0.01, v_max=0.0, omega_max=0.0)
    assert step_bound(params) == pytest.approx(0.01, rel=1e-6)


def test_step_bound_requires_box():
    with pytest.raises(ValueError):
        step_bound(SimParams(v_max=None))


def test_euler_displacement_within_bound_fuzz():
    params = SimParams(u_max=1.0, dt=0.01, v_max=10.0, omega_max=10.0)
    d1 = step_bound(params)
    rng = np.random.default_rng(1)
    n = 100_000
    states = np.column_stack(
        [
            rng.uniform(-50, 50, n),
            rng.uniform(-10, 10, n),
            rng.uniform(-4 * np.pi, 4 * np.pi, n),
            rng.uniform(-10, 10, n),
        ]
    )
    u = rng.uniform(-1, 1, n)
    disp = np.linalg.norm(eval_dynamics(states, u) * params.dt, axis=1)
    assert np.all(disp <= d1 + 1e-12)


def test_pole_energy_conserved_by_rk4_unforced():
    # near the homoclinic orbit, u = 0
    s = np.array([0.0, 0.0, np.pi - 0.01, 0.0])
    dtau = 1e-3
    e = pole_energy(s)
    for _ in range(2000):
        s2 = step_rk4(s, 0.0, dtau)
        assert abs(pole_energy(s2) - pole_energy(s)) < 1e-4 * dtau
        s = s2
    assert abs(pole_energy(s) - e) < 1e-6


def test_clamp_control():
    assert clamp_control(7.0, 1.0) == 1.0
    assert clamp_control(-7.0, 1.0) == -1.0
    assert clamp_control(0.3, 1.0) == 0.3


def test_sim_params_validation():
    with pytest.raises(ValueError):
        SimParams(u_max=-1.0)
    with pytest.raises(ValueError):
        SimParams(dt=0.001, dtau=0.01)
