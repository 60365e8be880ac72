"""Receding-horizon controller: quaternion error, shooting sensitivities,
condensed QP behavior, closed-loop regulation."""

import numpy as np
import pytest

from quadtrack import quaternions as quat
from quadtrack.nmpc import (
    NmpcController,
    OcpConfig,
    OcpWeights,
    ReferenceWindow,
    _Model,
    quat_error,
    quat_error_matrix,
    shoot,
)
from quadtrack.trajectories import EllipseSpec, flat_to_full, sample_ellipse
from quadtrack.vehicle import QuadParams

PARAMS = QuadParams()


def hover_state():
    x = np.zeros(13)
    x[6] = 1.0
    return x


def hover_input():
    return np.full(4, PARAMS.hover_thrust)


def test_quat_error_zero():
    q = quat.from_axis_angle([0.1, 0.5, 0.2], 0.9)
    np.testing.assert_allclose(quat_error(q, q), 0.0, atol=1e-12)


def test_quat_error_yaw():
    delta = 0.6
    q = quat.from_axis_angle([0, 0, 1], delta)
    np.testing.assert_allclose(quat_error(q, quat.IDENTITY),
                               [0, 0, np.sin(delta / 2)], atol=1e-12)


def test_quat_error_antisymmetry():
    rng = np.random.default_rng(0)
    for _ in range(100):
        q1 = quat.normalize(rng.normal(size=4))
        q2 = quat.normalize(rng.normal(size=4))
        e12 = quat_error(q1, q2)
        e21 = quat_error(q2, q1)
        np.testing.assert_allclose(e12, -e21, atol=1e-9)


def test_quat_error_matrix_is_exact():
    rng = np.random.default_rng(1)
    for _ in range(50):
        q = quat.normalize(rng.normal(size=4))
        q_r = quat.normalize(rng.normal(size=4))
        np.testing.assert_allclose(quat_error_matrix(q_r) @ q,
                                   quat_error(q, q_r), atol=1e-12)


def test_shoot_hover_fixed_point():
    cfg = OcpConfig()
    model = _Model(PARAMS, drag=False)
    x1, _, _ = shoot(hover_state(), hover_input(), cfg, model)
    np.testing.assert_allclose(x1, hover_state(), atol=1e-10)


def test_shoot_free_fall_velocity():
    cfg = OcpConfig(drag_model=False)
    model = _Model(PARAMS, drag=False)
    x1, _, _ = shoot(hover_state(), np.zeros(4), cfg, model)
    assert x1[5] == pytest.approx(-PARAMS.gravity * cfg.dt, rel=1e-12)
    assert x1[5] == pytest.approx(-0.4905, abs=1e-9)


@pytest.mark.parametrize("drag", [False, True])
def test_shoot_sensitivities_match_finite_differences(drag):
    cfg = OcpConfig(integrator_substeps=2)
    model = _Model(PARAMS, drag=drag)
    rng = np.random.default_rng(3)
    for _ in range(5):
        x = np.concatenate([rng.normal(size=3), rng.normal(size=3) * 3,
                            quat.normalize(rng.normal(size=4)),
                            rng.normal(size=3) * 2])
        u = rng.uniform(0.5, 8.0, size=4)
        _, Sx, Su = shoot(x, u, cfg, model)
        eps = 1e-6
        fd_x = np.empty_like(Sx)
        for i in range(13):
            xp, xm = x.copy(), x.copy()
            xp[i] += eps
            xm[i] -= eps
            fp, _, _ = shoot(xp, u, cfg, model, with_sensitivities=False)
            fm, _, _ = shoot(xm, u, cfg, model, with_sensitivities=False)
            fd_x[:, i] = (fp - fm) / (2 * eps)
        fd_u = np.empty_like(Su)
        for i in range(4):
            up, um = u.copy(), u.copy()
            up[i] += eps
            um[i] -= eps
            fp, _, _ = shoot(x, up, cfg, model, with_sensitivities=False)
            fm, _, _ = shoot(x, um, cfg, model, with_sensitivities=False)
            fd_u[:, i] = (fp - fm) / (2 * eps)
        scale_x = np.maximum(np.abs(fd_x), 1.0)
        scale_u = np.maximum(np.abs(fd_u), 1.0)
        assert np.max(np.abs(Sx - fd_x) / scale_x) < 1e-5
        assert np.max(np.abs(Su - fd_u) / scale_u) < 1e-5


def _rollout_window(x0, inputs, cfg, model):
    states = [x0]
    for u in inputs:
        nxt, _, _ = shoot(states[-1], u, cfg, model, with_sensitivities=False)
        states.append(nxt)
    return ReferenceWindow(np.array(states), np.array(inputs))


def test_rti_fixed_point_on_consistent_reference():
    # a rollout of the discrete dynamics is a zero-residual reference: the
    # first QP must return (near) zero corrections
    cfg = OcpConfig(drag_model=True)
    ctrl = NmpcController(PARAMS, config=cfg)
    rng = np.random.default_rng(7)
    x0 = hover_state()
    inputs = [np.clip(hover_input() + 0.05 * rng.normal(size=4), 0.2, 8.0)
              for _ in range(cfg.horizon)]
    window = _rollout_window(x0, inputs, cfg, ctrl.model)
    ctrl.initialize(window)
    sol = ctrl.step(x0, window)
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.u0, inputs[0], atol=1e-6)


def test_rti_hover_fixed_point():
    ctrl = NmpcController(PARAMS)
    window = ReferenceWindow(np.tile(hover_state(), (21, 1)),
                             np.tile(hover_input(), (20, 1)))
    ctrl.initialize(window)
    sol = ctrl.step(hover_state(), window)
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.u0, hover_input(), atol=1e-6)


def test_rti_hover_regulation_converges():
    # 0.1 m offset: thrust tilts toward the target and iterates settle back
    ctrl = NmpcController(PARAMS)
    window = ReferenceWindow(np.tile(hover_state(), (21, 1)),
                             np.tile(hover_input(), (20, 1)))
    x = hover_state()
    x[0] = 0.1
    ctrl.initialize(window)
    sol = ctrl.step(x, window)
    # pitch toward -x: rear rotors (3,4 at x<0) exceed front rotors (1,2)
    front = sol.u0[0] + sol.u0[1]
    rear = sol.u0[2] + sol.u0[3]
    assert rear < front
    for _ in range(200):
        xn, _, _ = shoot(x, sol.u0, OcpConfig(dt=0.01), ctrl.model,
                         with_sensitivities=False)
        x = xn
        sol = ctrl.step(x, window, elapsed=0.01)
    assert abs(x[0]) < 0.02
    np.testing.assert_allclose(sol.u0, hover_input(), atol=0.05)


def test_rti_bound_enforcement_infeasible_demand():
    # reference requiring impossible thrust: commands sit exactly on the box
    spec = EllipseSpec(5.0, 60.0, 1.0)
    refs = [flat_to_full(sample_ellipse(spec, 1.0 + 0.05 * k), PARAMS)
            for k in range(21)]
    window = ReferenceWindow.from_full_references(refs)
    ctrl = NmpcController(PARAMS)
    x0 = window.state(0)
    ctrl.initialize(window)
    # make the guess inputs interior so the QP has to push to the bound
    ctrl.U = np.full((20, 4), PARAMS.hover_thrust)
    sol = ctrl.step(x0, window)
    assert np.all(sol.inputs <= PARAMS.u_max + 1e-9)
    assert np.all(sol.inputs >= PARAMS.u_min - 1e-9)
    assert np.any(np.isclose(sol.inputs, PARAMS.u_max, atol=1e-7))
    for _ in range(3):
        sol = ctrl.step(x0, window, elapsed=0.01)
    assert np.all(sol.u0 <= PARAMS.u_max + 1e-9)
    assert np.any(np.isclose(sol.u0, PARAMS.u_max, atol=1e-6))


def test_rti_qp_model_decrease():
    # the QP step never increases the local quadratic model when the current
    # guess is feasible (z = 0 is a feasible point)
    spec = EllipseSpec(5.0, 10.0, 1.0)
    refs = [flat_to_full(sample_ellipse(spec, 0.05 * k), PARAMS)
            for k in range(21)]
    window = ReferenceWindow.from_full_references(refs)
    ctrl = NmpcController(PARAMS)
    x0 = window.state(0) + 0.05
    x0[6:10] = quat.normalize(x0[6:10])
    ctrl.initialize(window)
    sol = ctrl.step(x0, window)
    assert sol.qp_objective <= sol.qp_objective_start + 1e-9


def test_warm_start_reduces_qp_iterations():
    # second cycle on a static reference should need fewer active-set steps
    ctrl = NmpcController(PARAMS)
    window = ReferenceWindow(np.tile(hover_state(), (21, 1)),
                             np.tile(hover_input(), (20, 1)))
    x = hover_state()
    x[0:3] = [0.5, -0.3, 0.4]
    ctrl.initialize(window)
    first = ctrl.step(x, window)
    second = ctrl.step(x, window, elapsed=0.01)
    assert second.qp_iterations <= first.qp_iterations


def test_rate_constraint_respected_with_slack():
    # aggressive yaw-reference step: predicted rates stay within bound + 5%
    cfg = OcpConfig()
    ctrl = NmpcController(PARAMS, config=cfg)
    target = hover_state()
    target[6:10] = quat.from_axis_angle([0, 0, 1], 2.5)
    window = ReferenceWindow(np.tile(target, (21, 1)),
                             np.tile(hover_input(), (20, 1)))
    ctrl.initialize(window)
    ctrl.X = np.tile(hover_state(), (21, 1))
    ctrl.U = np.tile(hover_input(), (20, 1))
    sol = ctrl.step(hover_state(), window)
    assert sol.status == "optimal"
    preds = [hover_state()]
    for k in range(cfg.horizon):
        nxt, _, _ = shoot(preds[-1], sol.inputs[k], cfg, ctrl.model,
                          with_sensitivities=False)
        preds.append(nxt)
    worst = max(np.max(np.abs(p[10:13])) for p in preds)
    assert worst <= cfg.rate_bound * 1.05
