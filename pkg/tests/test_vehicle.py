"""Plant model: mixing map, drag, dynamics, RK4 integrator."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadtrack import quaternions as quat
from quadtrack.vehicle import (
    NO_DISTURBANCE,
    Disturbance,
    NonFiniteStateError,
    PlantOptions,
    QuadParams,
    QuadState,
    drag_force_body,
    dynamics,
    mixing_matrices,
    rk4_step,
    rk4_step_speeds,
    thrusts_from_speeds,
)

PARAMS = QuadParams()
NO_GYRO = PlantOptions(drag=False, gyro_torques=False)


def test_mixing_matrix_entries():
    g1, g2 = mixing_matrices(PARAMS)
    np.testing.assert_allclose(g1[0], 1.0)
    assert g1[1, 0] == pytest.approx(0.14 * np.sin(np.deg2rad(56.0)), abs=1e-6)
    assert g1[1, 0] == pytest.approx(0.11607, abs=5e-6)
    assert g1[3, 0] == pytest.approx(2.37e-8 / 1.51e-6, rel=1e-12)
    assert g1[3, 0] == pytest.approx(0.015695, abs=1e-6)
    # equal thrusts produce zero torque
    np.testing.assert_allclose(g1[1:] @ np.ones(4), 0.0, atol=1e-12)
    # rotor-inertia map only acts on yaw
    assert np.all(g2[:3] == 0.0)
    np.testing.assert_allclose(g2[3], [1e-5, -1e-5, 1e-5, -1e-5])


def test_mixing_matrix_invertible_roundtrip():
    g1, _ = mixing_matrices(PARAMS)
    rng = np.random.default_rng(0)
    for _ in range(100):
        u = rng.uniform(PARAMS.u_min, PARAMS.u_max, 4)
        np.testing.assert_allclose(np.linalg.solve(g1, g1 @ u), u, atol=1e-10)


def test_thrust_from_speeds():
    np.testing.assert_allclose(thrusts_from_speeds(np.zeros(4), PARAMS), 0.0)
    u = thrusts_from_speeds(np.full(4, 2000.0), PARAMS)
    np.testing.assert_allclose(u, 6.04, rtol=1e-12)
    # hover: u = mg/4 at ~1103.7 rad/s
    w = PARAMS.speed_from_thrust(PARAMS.hover_thrust)
    assert PARAMS.hover_thrust == pytest.approx(1.8394, abs=1e-4)
    assert w == pytest.approx(1103.7, abs=0.05)


def test_thrust_to_weight_ratio():
    assert 4 * PARAMS.u_max / (PARAMS.mass * PARAMS.gravity) == pytest.approx(4.62, abs=0.005)


def test_drag_force_spot_values():
    np.testing.assert_allclose(drag_force_body(np.zeros(3), PARAMS), 0.0)
    np.testing.assert_allclose(drag_force_body(np.array([10.0, 0, 0]), PARAMS),
                               [-2.6, 0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(drag_force_body(np.array([0, 0, 5.0]), PARAMS),
                               [0.0, 0.0, -2.1], atol=1e-12)


def test_hover_equilibrium_derivative():
    state = QuadState.hover(PARAMS)
    u = np.full(4, PARAMS.hover_thrust)
    xdot = dynamics(state, u, PARAMS, options=NO_GYRO)
    np.testing.assert_allclose(xdot, 0.0, atol=1e-9)


def test_free_fall():
    state = QuadState.hover(PARAMS)
    state.rotor_speeds = np.zeros(4)
    xdot = dynamics(state, np.zeros(4), PARAMS, options=NO_GYRO)
    np.testing.assert_allclose(xdot[3:6], [0, 0, -PARAMS.gravity], atol=1e-12)


def test_motor_lag_63_percent_rise():
    # step in commanded speed reaches 1 - 1/e of the step after tau_m
    state = QuadState.hover(PARAMS)
    w0 = state.rotor_speeds.copy()
    w_cmd = w0 + 200.0
    x = state.as_vector()
    dt = 1e-3
    steps = int(round(PARAMS.motor_tau / dt))
    for k in range(steps):
        x = rk4_step_speeds(x, w_cmd, PARAMS, NO_DISTURBANCE, k * dt, dt,
                            PlantOptions(drag=False))
    frac = (x[13:] - w0) / 200.0
    np.testing.assert_allclose(frac, 1 - np.exp(-1.0), atol=1e-9)


def test_equilibrium_step_unchanged():
    state = QuadState.hover(PARAMS, pos=(1.0, 2.0, 3.0))
    u = np.full(4, PARAMS.hover_thrust)
    nxt = rk4_step(state, u, PARAMS, dt=0.002, options=NO_GYRO)
    np.testing.assert_allclose(nxt.as_vector(), state.as_vector(), atol=1e-10)


def test_pure_rotation_closed_form():
    # Omega = (0, 0, pi) for 1 s from identity is a 180 deg yaw
    state = QuadState.hover(PARAMS)
    state.rates = np.array([0.0, 0.0, np.pi])
    state.rotor_speeds = np.zeros(4)   # no thrust/torque
    x = state.as_vector()
    dt = 1e-3
    opts = PlantOptions(drag=False, gyro_torques=False, motor_lag=False)
    # zero out angular acceleration by symmetric (zero) thrusts; yaw spin is
    # torque-free about a principal axis
    for k in range(1000):
        x = rk4_step_speeds(x, np.zeros(4), PARAMS, NO_DISTURBANCE, k * dt, dt, opts)
    expect = quat.from_axis_angle([0, 0, 1], np.pi)
    err = min(np.linalg.norm(x[6:10] - expect), np.linalg.norm(x[6:10] + expect))
    assert err < 1e-6


def _spin_reference(x0, t_end, n_steps):
    """Fine-step RK4 reference for the torque-free tumbling test."""
    opts = PlantOptions(drag=False, gyro_torques=False, motor_lag=False)
    x = x0.copy()
    dt = t_end / n_steps
    for k in range(n_steps):
        x = rk4_step_speeds(x, np.zeros(4), PARAMS, NO_DISTURBANCE, k * dt, dt, opts)
    return x


def test_rk4_fourth_order_convergence():
    # halving dt shrinks the error roughly 16x on a tumbling rigid body
    state = QuadState.hover(PARAMS)
    state.rates = np.array([3.0, -2.0, 1.5])
    state.rotor_speeds = np.zeros(4)
    state.vel = np.array([1.0, 0.5, -0.2])
    x0 = state.as_vector()
    t_end = 0.5
    ref = _spin_reference(x0, t_end, 8192)
    errs = []
    for n in (16, 32, 64, 128):
        xs = _spin_reference(x0, t_end, n)
        errs.append(np.linalg.norm(xs[:13] - ref[:13]))
    rates = [errs[i] / errs[i + 1] for i in range(len(errs) - 1)]
    for r in rates:
        assert 11.0 < r < 22.0, f"convergence ratios {rates}"


def test_quaternion_norm_preserved():
    rng = np.random.default_rng(1)
    state = QuadState.hover(PARAMS)
    state.rates = rng.normal(size=3)
    x = state.as_vector()
    for k in range(500):
        u = rng.uniform(0, PARAMS.u_max, 4)
        x = rk4_step_speeds(x, PARAMS.speed_from_thrust(u), PARAMS,
                            NO_DISTURBANCE, k * 0.002, 0.002)
        assert abs(np.linalg.norm(x[6:10]) - 1.0) < 1e-9


def test_hover_energy_drift():
    # thrusts exactly balance weight: kinetic energy stays ~0 for 10 s
    state = QuadState.hover(PARAMS)
    u = np.full(4, PARAMS.hover_thrust)
    w_cmd = PARAMS.speed_from_thrust(u)
    x = state.as_vector()
    opts = PlantOptions(drag=False, gyro_torques=False)
    for k in range(5000):
        x = rk4_step_speeds(x, w_cmd, PARAMS, NO_DISTURBANCE, k * 0.002, 0.002, opts)
    ke = 0.5 * PARAMS.mass * np.dot(x[3:6], x[3:6])
    assert ke < 1e-6


def test_disturbance_window_and_force():
    state = QuadState.hover(PARAMS)
    dist = Disturbance(force=np.array([1.0, 0, 0]), t_on=1.0, t_off=2.0)
    u = np.full(4, PARAMS.hover_thrust)
    before = dynamics(state, u, PARAMS, dist, t=0.5, options=NO_GYRO)
    during = dynamics(state, u, PARAMS, dist, t=1.5, options=NO_GYRO)
    np.testing.assert_allclose(before[3:6], 0.0, atol=1e-9)
    np.testing.assert_allclose(during[3:6], [1.0 / PARAMS.mass, 0, 0], atol=1e-9)
    with pytest.raises(ValueError):
        Disturbance(t_on=3.0, t_off=1.0)


def test_cog_bias_torque():
    # offset CoG turns collective thrust into a pitch moment
    state = QuadState.hover(PARAMS)
    u = np.full(4, PARAMS.hover_thrust)
    opts = PlantOptions(drag=False, gyro_torques=False, cog_bias_frac=0.15)
    xdot = dynamics(state, u, PARAMS, options=opts)
    expected = np.cross([0.15 * PARAMS.arm_length, 0, 0],
                        [0, 0, PARAMS.mass * PARAMS.gravity])
    np.testing.assert_allclose(xdot[10:13] * PARAMS.inertia, expected, atol=1e-9)


def test_nonfinite_state_raises():
    state = QuadState.hover(PARAMS)
    state.vel[0] = np.nan
    with pytest.raises(NonFiniteStateError):
        dynamics(state, np.zeros(4), PARAMS)
    with pytest.raises(NonFiniteStateError):
        rk4_step(state, np.zeros(4), PARAMS)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 8.5), min_size=4, max_size=4))
def test_g1_roundtrip_property(u):
    g1, _ = mixing_matrices(PARAMS)
    u = np.array(u)
    np.testing.assert_allclose(np.linalg.solve(g1, g1 @ u), u, atol=1e-10)


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        QuadParams(mass=-1.0)
    with pytest.raises(ValueError):
        QuadParams(arm_angle=2.0)
    with pytest.raises(ValueError):
        QuadParams(u_min=9.0, u_max=8.5)
