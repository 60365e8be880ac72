"""Quadrotor rigid-body plant: parameters, mixing map, dynamics, RK4 stepping.

Conventions (fixed here; every sign-sensitive test refers to this block):
  - Inertial frame: z up (gravity is -z). Body frame: z along collective
    thrust, x forward.
  - Rotor layout: rotor 1 front-left (+x, +y), 2 front-right (+x, -y),
    3 back-right (-x, -y), 4 back-left (-x, +y), arms at angle ``arm_angle``
    from body-x, so rotor positions are (+-l*cos(beta), +-l*sin(beta)).
    Rotors 1 and 3 produce a positive-z reaction torque.
  - State vector (17): position 0:3, inertial velocity 3:6, attitude
    quaternion 6:10 (scalar first, body->inertial), body rates 10:13,
    rotor speeds 13:17.

The plant accepts rotor-speed commands; the thrust-command entry points
convert through the Hadamard map u = c_t * w**2 of the supplied params.
Motor response is a first-order lag on rotor speed, applied as the exact
discrete update w+ = w + (1 - exp(-dt/tau_m)) (w_cmd - w); within an RK4
step the rotor speeds are evaluated at the exact stage times.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import quaternions as quat

IX_POS = slice(0, 3)
IX_VEL = slice(3, 6)
IX_QUAT = slice(6, 10)
IX_RATES = slice(10, 13)
IX_ROTORS = slice(13, 17)
STATE_DIM = 17


class NonFiniteStateError(RuntimeError):
    """Raised when the plant state or derivative leaves the finite domain."""


@dataclass(frozen=True)
class QuadParams:
    """Inertial, geometric and aerodynamic constants of the test quadrotor."""

    mass: float = 0.75               # kg
    arm_length: float = 0.14         # m
    arm_angle: float = np.deg2rad(56.0)
    inertia: tuple = (2.5e-3, 2.1e-3, 4.3e-3)   # kg m^2, body-diagonal
    rotor_inertia: float = 1.0e-5    # kg m^2, about body z (not measured; configurable)
    thrust_coeff: float = 1.51e-6    # N s^2/rad^2
    torque_coeff: float = 2.37e-8    # N m s^2/rad^2
    u_min: float = 0.0               # N, per rotor
    u_max: float = 8.5               # N, per rotor
    drag_coeffs: tuple = (0.26, 0.28, 0.42)     # kg/s
    drag_kh: float = 0.01            # kg/m
    gravity: float = 9.81            # m/s^2
    motor_tau: float = 0.030         # s

    def __post_init__(self):
        if self.mass <= 0 or self.arm_length <= 0:
            raise ValueError("mass and arm length must be positive")
        if not 0 < self.arm_angle < np.pi / 2:
            raise ValueError("arm angle must lie in (0, pi/2)")
        if min(self.inertia) <= 0 or self.thrust_coeff <= 0 or self.torque_coeff <= 0:
            raise ValueError("inertia and rotor coefficients must be positive")
        if not 0 <= self.u_min < self.u_max:
            raise ValueError("thrust bounds must satisfy 0 <= u_min < u_max")
        if min(self.drag_coeffs) < 0 or self.drag_kh < 0:
            raise ValueError("drag coefficients must be nonnegative")
        if self.motor_tau <= 0:
            raise ValueError("motor time constant must be positive")

    @property
    def inertia_matrix(self):
        return np.diag(self.inertia)

    @property
    def hover_thrust(self):
        """Per-rotor thrust balancing weight."""
        return self.mass * self.gravity / 4.0

    def speed_from_thrust(self, u):
        return np.sqrt(np.maximum(np.asarray(u, dtype=float), 0.0) / self.thrust_coeff)

    def thrust_from_speed(self, w):
        return self.thrust_coeff * np.square(np.asarray(w, dtype=float))

    def speed_limits(self):
        """Rotor-speed box equivalent to the per-rotor thrust bounds."""
        return (float(np.sqrt(self.u_min / self.thrust_coeff)),
                float(np.sqrt(self.u_max / self.thrust_coeff)))

    def perturbed(self, mass_scale=1.0, ct_scale=1.0, cq_scale=1.0, drag_scale=1.0):
        return replace(
            self,
            mass=self.mass * mass_scale,
            thrust_coeff=self.thrust_coeff * ct_scale,
            torque_coeff=self.torque_coeff * cq_scale,
            drag_coeffs=tuple(k * drag_scale for k in self.drag_coeffs),
            drag_kh=self.drag_kh * drag_scale,
        )


@dataclass
class QuadState:
    """Full plant state; value-semantic."""

    pos: np.ndarray
    vel: np.ndarray
    quat: np.ndarray
    rates: np.ndarray
    rotor_speeds: np.ndarray

    @classmethod
    def hover(cls, params, pos=(0.0, 0.0, 0.0)):
        w = params.speed_from_thrust(np.full(4, params.hover_thrust))
        return cls(np.array(pos, dtype=float), np.zeros(3), quat.IDENTITY.copy(),
                   np.zeros(3), w)

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(x[IX_POS].copy(), x[IX_VEL].copy(), x[IX_QUAT].copy(),
                   x[IX_RATES].copy(), x[IX_ROTORS].copy())

    def as_vector(self):
        return np.concatenate([self.pos, self.vel, self.quat, self.rates,
                               self.rotor_speeds])

    def copy(self):
        return QuadState.from_vector(self.as_vector())


@dataclass(frozen=True)
class BodyWrench:
    thrust: float
    torque: np.ndarray


@dataclass(frozen=True)
class Disturbance:
    """Constant external force (inertial) and torque (body) over a time window."""

    force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    torque: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t_on: float = 0.0
    t_off: float = np.inf

    def __post_init__(self):
        if self.t_on > self.t_off:
            raise ValueError("disturbance window must satisfy t_on <= t_off")

    def active(self, t):
        return self.t_on <= t < self.t_off


NO_DISTURBANCE = Disturbance()


@dataclass(frozen=True)
class PlantOptions:
    """Simulation switches for the plant dynamics."""

    drag: bool = True
    gyro_torques: bool = True        # rotor angular-acceleration and gyroscopic torques
    motor_lag: bool = True
    cog_bias_frac: float = 0.0       # CoG offset along body-x as a fraction of arm length
    speed_limits: tuple = None       # (w_min, w_max) clamp on commands; None = from params


DEFAULT_OPTIONS = PlantOptions()


def mixing_matrices(params):
    """Thrust/torque mixing (G1) and rotor-inertia (G2) maps; G1 is invertible."""
    ls = params.arm_length * np.sin(params.arm_angle)
    lc = params.arm_length * np.cos(params.arm_angle)
    kq = params.torque_coeff / params.thrust_coeff
    ip = params.rotor_inertia
    g1 = np.array([
        [1.0, 1.0, 1.0, 1.0],
        [ls, -ls, -ls, ls],
        [-lc, -lc, lc, lc],
        [kq, -kq, kq, -kq],
    ])
    g2 = np.zeros((4, 4))
    g2[3] = [ip, -ip, ip, -ip]
    return g1, g2


def thrusts_from_speeds(w, params):
    """Per-rotor thrust via the elementwise square law u_i = c_t w_i^2."""
    return params.thrust_coeff * np.square(np.asarray(w, dtype=float))


def drag_force_body(v_body, params):
    """Aerodynamic force in the body frame for body-frame velocity v_body."""
    kx, ky, kz = params.drag_coeffs
    return np.array([
        -kx * v_body[0],
        -ky * v_body[1],
        -kz * v_body[2] + params.drag_kh * (v_body[0] ** 2 + v_body[1] ** 2),
    ])


def _deriv(x, w, w_dot, params, g1, g2_yaw, dist, t, options):
    """Time derivative of the 13 rigid-body states given rotor speeds w."""
    vel = x[IX_VEL]
    q = x[IX_QUAT]
    rates = x[IX_RATES]
    R = quat.rotmat(q)

    u = params.thrust_coeff * np.square(w)
    thrust = u.sum()
    torque = g1[1:] @ u

    if options.gyro_torques:
        sw = w[0] - w[1] + w[2] - w[3]
        ip = params.rotor_inertia
        torque = torque + np.array([ip * rates[1] * sw, -ip * rates[0] * sw, 0.0])
        torque[2] += g2_yaw @ w_dot
    if options.cog_bias_frac != 0.0:
        # thrust acting at the geometric center while the CoG sits at
        # cog_bias_frac * l along body-x
        r = options.cog_bias_frac * params.arm_length
        torque = torque + np.cross(np.array([r, 0.0, 0.0]),
                                   np.array([0.0, 0.0, thrust]))
    if dist.active(t):
        torque = torque + dist.torque

    force_body = np.array([0.0, 0.0, thrust])
    if options.drag:
        force_body = force_body + drag_force_body(R.T @ vel, params)
    accel = (R @ force_body) / params.mass
    accel[2] -= params.gravity
    if dist.active(t):
        accel = accel + dist.force / params.mass

    iv = params.inertia
    ivw = np.array([iv[0] * rates[0], iv[1] * rates[1], iv[2] * rates[2]])
    ang_accel = (torque - np.cross(rates, ivw)) / np.asarray(iv)

    out = np.empty(13)
    out[0:3] = vel
    out[3:6] = accel
    out[6:10] = quat.derivative(q, rates)
    out[10:13] = ang_accel
    return out


def dynamics(state, u_cmd, params, dist=NO_DISTURBANCE, t=0.0,
             options=DEFAULT_OPTIONS):
    """Continuous-time state derivative under per-rotor thrust commands.

    Thrust commands are converted to rotor-speed demands through the square
    law; rotor speeds relax toward them with the motor time constant. Thrust
    and torque are produced by the instantaneous speeds, not the commands.
    """
    x = state.as_vector() if isinstance(state, QuadState) else np.asarray(state, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NonFiniteStateError("non-finite plant state")
    w_cmd = params.speed_from_thrust(u_cmd)
    return dynamics_speeds(x, w_cmd, params, dist, t, options)


def dynamics_speeds(x, w_cmd, params, dist=NO_DISTURBANCE, t=0.0,
                    options=DEFAULT_OPTIONS):
    """State derivative under rotor-speed commands (17-vector in and out)."""
    g1, g2 = mixing_matrices(params)
    w = x[IX_ROTORS]
    if options.motor_lag:
        w_dot = (w_cmd - w) / params.motor_tau
    else:
        w_dot = np.zeros(4)
    out = np.empty(STATE_DIM)
    out[:13] = _deriv(x, w, w_dot, params, g1, g2[3], dist, t, options)
    out[IX_ROTORS] = w_dot
    return out


def rk4_step_speeds(x, w_cmd, params, dist, t, dt, options=DEFAULT_OPTIONS):
    """One RK4 step of the rigid-body states with exact rotor-speed update."""
    if not np.all(np.isfinite(x)):
        raise NonFiniteStateError("non-finite plant state at t=%.4f" % t)
    g1, g2 = mixing_matrices(params)
    g2_yaw = g2[3]

    lo, hi = options.speed_limits if options.speed_limits else params.speed_limits()
    w_cmd = np.clip(w_cmd, lo, hi)

    w0 = x[IX_ROTORS]
    if options.motor_lag:
        tau = params.motor_tau
        w_half = w_cmd + (w0 - w_cmd) * np.exp(-0.5 * dt / tau)
        w_full = w_cmd + (w0 - w_cmd) * np.exp(-dt / tau)
        wd0 = (w_cmd - w0) / tau
        wd_half = (w_cmd - w_half) / tau
        wd_full = (w_cmd - w_full) / tau
    else:
        w0 = w_half = w_full = w_cmd
        wd0 = wd_half = wd_full = np.zeros(4)

    rb = x[:13]
    k1 = _deriv(x, w0, wd0, params, g1, g2_yaw, dist, t, options)
    x2 = x.copy()
    x2[:13] = rb + 0.5 * dt * k1
    k2 = _deriv(x2, w_half, wd_half, params, g1, g2_yaw, dist, t + 0.5 * dt, options)
    x3 = x.copy()
    x3[:13] = rb + 0.5 * dt * k2
    k3 = _deriv(x3, w_half, wd_half, params, g1, g2_yaw, dist, t + 0.5 * dt, options)
    x4 = x.copy()
    x4[:13] = rb + dt * k3
    k4 = _deriv(x4, w_full, wd_full, params, g1, g2_yaw, dist, t + dt, options)

    out = np.empty(STATE_DIM)
    out[:13] = rb + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    qn = out[IX_QUAT]
    out[IX_QUAT] = qn / np.linalg.norm(qn)
    out[IX_ROTORS] = np.maximum(w_full, 0.0)
    if not np.all(np.isfinite(out)):
        raise NonFiniteStateError("non-finite plant state after step at t=%.4f" % t)
    return out


def rk4_step(state, u_cmd, params, dist=NO_DISTURBANCE, t=0.0, dt=0.002,
             options=DEFAULT_OPTIONS):
    """RK4 step under per-rotor thrust commands; returns a QuadState."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = state.as_vector() if isinstance(state, QuadState) else np.asarray(state, dtype=float)
    w_cmd = params.speed_from_thrust(u_cmd)
    out = rk4_step_speeds(x, w_cmd, params, dist, t, dt, options)
    return QuadState.from_vector(out)
