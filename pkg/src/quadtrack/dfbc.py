"""Differential-flatness-based tracking controller.

Cascade: PD position loop -> desired thrust vector and attitude ->
jerk/snap feedforward of body rates and angular accelerations (evaluated
with the *current* attitude, rates and measured collective thrust) ->
tilt-prioritized quaternion attitude law -> per-rotor allocation, either
direct mixed-matrix inversion with clamping or a weighted box-constrained
QP that trades collective/yaw authority to preserve roll and pitch when
rotors saturate.
"""

from dataclasses import dataclass, field

import numpy as np

from . import quaternions as quat
from .qp import ActiveSetQp, QpProblem
from .trajectories import THRUST_EPS, Z_I
from .vehicle import drag_force_body, mixing_matrices


@dataclass(frozen=True)
class DfbcGains:
    """Position/attitude gains and allocation weight; defaults are the tuned
    benchmark values."""

    k_pos: tuple = (10.0, 10.0, 10.0)      # 1/s^2
    k_vel: tuple = (6.0, 6.0, 6.0)         # 1/s
    k_att_red: float = 150.0               # 1/s^2, roll/pitch quaternion error
    k_att_yaw: float = 3.0                 # 1/s^2
    k_rate: tuple = (20.0, 20.0, 8.0)      # 1/s
    alloc_weight: tuple = (0.001, 10.0, 10.0, 0.1)   # thrust, x/y torque, yaw

    def __post_init__(self):
        vals = (*self.k_pos, *self.k_vel, self.k_att_red, self.k_att_yaw,
                *self.k_rate, *self.alloc_weight)
        if min(vals) <= 0:
            raise ValueError("all gains must be positive")


def synthesize_gains(omega_n_pos, zeta_pos, omega_n_xy, omega_n_z, zeta_att,
                     alloc_weight=(0.001, 10.0, 10.0, 0.1)):
    """Gains from closed-loop natural frequencies and damping ratios."""
    if min(omega_n_pos, zeta_pos, omega_n_xy, omega_n_z, zeta_att) <= 0:
        raise ValueError("frequencies and damping ratios must be positive")
    k_pos = omega_n_pos ** 2
    k_vel = 2.0 * zeta_pos * omega_n_pos
    return DfbcGains(
        k_pos=(k_pos,) * 3,
        k_vel=(k_vel,) * 3,
        k_att_red=omega_n_xy ** 2,
        k_att_yaw=omega_n_z ** 2,
        k_rate=(2.0 * zeta_att * omega_n_xy, 2.0 * zeta_att * omega_n_xy,
                2.0 * zeta_att * omega_n_z),
        alloc_weight=alloc_weight,
    )


@dataclass
class DfbcCommand:
    collective: float
    ang_accel_des: np.ndarray
    rotor_thrusts: np.ndarray
    saturated: bool
    feedforward_ok: bool = True


def position_loop(state, ref, gains, params, drag_model=True):
    """Desired acceleration, collective thrust and attitude from PD tracking.

    Returns (acc_des, T_des, q_des).
    """
    acc_des = (np.asarray(gains.k_pos) * (ref.pos - state.pos)
               + np.asarray(gains.k_vel) * (ref.vel - state.vel)
               + ref.acc)
    R = quat.rotmat(state.quat)
    thrust_vec = params.mass * (acc_des - np.array([0.0, 0.0, -params.gravity]))
    if drag_model:
        thrust_vec = thrust_vec - R @ drag_force_body(R.T @ state.vel, params)
    T = np.linalg.norm(thrust_vec)
    if T < THRUST_EPS:
        raise ValueError("degenerate thrust demand (free-fall direction)")
    z_b = thrust_vec / T
    x_c = np.array([np.cos(ref.heading), np.sin(ref.heading), 0.0])
    y_dir = np.cross(z_b, x_c)
    ny = np.linalg.norm(y_dir)
    if ny < 1e-6:
        raise ValueError("desired thrust parallel to heading axis")
    y_b = y_dir / ny
    q_des = quat.from_rotmat(np.column_stack([np.cross(y_b, z_b), y_b, z_b]))
    return acc_des, float(T), q_des


def flat_feedforward(state, ref, params, collective):
    """Body-rate and angular-acceleration feedforward from jerk and snap.

    Uses the measured attitude, rates and collective thrust. Near the thrust
    singularity the feedforward is zeroed instead of erroring so the attitude
    loop can keep flying; the flag reports the fallback.
    """
    if collective <= THRUST_EPS:
        return np.zeros(3), np.zeros(3), False
    m = params.mass
    R = quat.rotmat(state.quat)
    x_b, y_b, z_b = R[:, 0], R[:, 1], R[:, 2]
    omega_inertial = R @ state.rates

    t_dot = m * np.dot(ref.jerk, z_b)
    h_w = (m * ref.jerk - t_dot * z_b) / collective
    rates_ff = np.array([-np.dot(h_w, y_b),
                         np.dot(h_w, x_b),
                         ref.heading_rate * z_b[2]])

    t_ddot = m * np.dot(ref.snap, z_b) + m * np.dot(np.cross(omega_inertial, z_b),
                                                    ref.jerk)
    h_a = ((m / collective) * ref.snap
           - (np.cross(omega_inertial, np.cross(omega_inertial, z_b))
              + (2.0 * t_dot / collective) * np.cross(omega_inertial, z_b)
              + (t_ddot / collective) * z_b))
    accel_ff = np.array([-np.dot(h_a, y_b),
                         np.dot(h_a, x_b),
                         ref.heading_acc * z_b[2]])
    return rates_ff, accel_ff, True


def attitude_error_split(q, q_des):
    """Tilt/yaw decomposition of the body-frame attitude error q^-1 ⊗ q_des.

    Returns (e_red, e_yaw, sign_w): 3-vectors with e_red z-free and e_yaw
    x/y-free, plus the sign of the error scalar part. The error must live in
    the body frame so its components map onto body torque axes.
    """
    qe = quat.multiply(quat.conjugate(q), q_des)
    w, x, y, z = qe
    denom_sq = w * w + z * z
    if denom_sq < 1e-12:
        raise ValueError("attitude error at the 90 deg tilt singularity")
    denom = np.sqrt(denom_sq)
    e_red = np.array([w * x - y * z, w * y + x * z, 0.0]) / denom
    e_yaw = np.array([0.0, 0.0, z]) / denom
    return e_red, e_yaw, (1.0 if w >= 0 else -1.0)


def tilt_prioritized_attitude(q, q_des, rates, rates_ff, accel_ff, gains):
    """Desired angular acceleration with separate tilt and yaw stiffness."""
    e_red, e_yaw, sign_w = attitude_error_split(q, q_des)
    return (gains.k_att_red * e_red
            + gains.k_att_yaw * sign_w * e_yaw
            + np.asarray(gains.k_rate) * (rates_ff - rates)
            + accel_ff)


def allocate(collective, ang_accel_des, rates, params, weight=None,
             mode="qp", solver=None):
    """Per-rotor thrusts for a desired collective and angular acceleration.

    ``direct`` inverts the mixing matrix and clamps; ``qp`` minimizes the
    weighted wrench residual subject to the per-rotor box, which sacrifices
    collective/yaw before roll/pitch when saturated. Returns (u, saturated).
    """
    g1, _ = mixing_matrices(params)
    iv = np.asarray(params.inertia)
    wrench = np.concatenate([[collective],
                             iv * ang_accel_des + np.cross(rates, iv * rates)])
    u_direct = np.linalg.solve(g1, wrench)
    inside = np.all((u_direct >= params.u_min - 1e-9)
                    & (u_direct <= params.u_max + 1e-9))
    if mode == "direct" or inside:
        u = np.clip(u_direct, params.u_min, params.u_max)
        return u, not inside
    if mode != "qp":
        raise ValueError("allocation mode must be 'direct' or 'qp'")

    W = np.diag(weight if weight is not None else (0.001, 10.0, 10.0, 0.1))
    H = 2.0 * g1.T @ W @ g1
    g = -2.0 * g1.T @ W @ wrench
    prob = QpProblem(H, g, np.full(4, params.u_min), np.full(4, params.u_max))
    solver = solver or ActiveSetQp()
    sol = solver.solve(prob, x0=np.clip(u_direct, params.u_min, params.u_max))
    if sol.status != "optimal":
        u = np.clip(u_direct, params.u_min, params.u_max)
        return u, True
    return sol.x, True


class DfbcController:
    """Stateless tracking controller; holds gains, model params and options."""

    def __init__(self, params, gains=None, drag_model=True, allocation="qp",
                 feedforward_accel=True):
        self.params = params
        self.gains = gains or DfbcGains()
        self.drag_model = drag_model
        self.allocation = allocation
        self.feedforward_accel = feedforward_accel
        self._solver = ActiveSetQp()
        self._g1, _ = mixing_matrices(params)

    def measured_collective(self, rotor_speeds):
        """Collective thrust from measured rotor speeds via the square law."""
        return float(np.sum(self.params.thrust_coeff * np.square(rotor_speeds)))

    def command(self, state, ref):
        _, T_des, q_des = position_loop(state, ref, self.gains, self.params,
                                        self.drag_model)
        T_meas = self.measured_collective(state.rotor_speeds)
        rates_ff, accel_ff, ff_ok = flat_feedforward(state, ref, self.params,
                                                     T_meas)
        if not self.feedforward_accel:
            accel_ff = np.zeros(3)
        alpha_des = tilt_prioritized_attitude(state.quat, q_des, state.rates,
                                              rates_ff, accel_ff, self.gains)
        u, saturated = allocate(T_des, alpha_des, state.rates, self.params,
                                self.gains.alloc_weight, self.allocation,
                                self._solver)
        return DfbcCommand(T_des, alpha_des, u, saturated, ff_ok)
