"""Incremental nonlinear dynamic inversion inner loop.

Converts per-rotor thrust commands from either outer controller into
rotor-speed commands. Rotational model mismatch is cancelled by replacing
the torque model with synchronized filtered measurements: the achieved
torque is reconstructed from filtered rotor speeds, the achieved angular
acceleration from filtered body rates, and the speed command solves the
mixing equation that includes the rotor-inertia yaw coupling. Both filter
channels share one biquad design so their group delays match.
"""

from dataclasses import dataclass

import numpy as np

from .vehicle import mixing_matrices


@dataclass(frozen=True)
class BiquadCoeffs:
    b0: float
    b1: float
    b2: float
    a1: float
    a2: float


def butterworth2(cutoff_hz, sample_hz):
    """Discrete second-order Butterworth low-pass (bilinear, pre-warped).

    Unity DC gain; magnitude is -3 dB at the cutoff by construction.
    """
    if not 0 < cutoff_hz < 0.5 * sample_hz:
        raise ValueError("cutoff must lie below the Nyquist frequency")
    wc = np.tan(np.pi * cutoff_hz / sample_hz)
    k1 = np.sqrt(2.0) * wc
    k2 = wc * wc
    den = 1.0 + k1 + k2
    return BiquadCoeffs(b0=k2 / den, b1=2.0 * k2 / den, b2=k2 / den,
                        a1=2.0 * (k2 - 1.0) / den, a2=(1.0 - k1 + k2) / den)


def biquad_response(coeffs, freq_hz, sample_hz):
    """Complex frequency response at freq_hz."""
    z = np.exp(-2j * np.pi * freq_hz / sample_hz)
    num = coeffs.b0 + coeffs.b1 * z + coeffs.b2 * z * z
    den = 1.0 + coeffs.a1 * z + coeffs.a2 * z * z
    return num / den


class Biquad:
    """Direct-form-II-transposed biquad over vector channels."""

    def __init__(self, coeffs, channels):
        self.c = coeffs
        self.s1 = np.zeros(channels)
        self.s2 = np.zeros(channels)

    def initialize(self, x0):
        """Settle the filter at a constant input (steady-state init)."""
        x0 = np.asarray(x0, dtype=float)
        c = self.c
        self.s2 = (c.b2 - c.a2) * x0
        self.s1 = (c.b1 - c.a1) * x0 + self.s2

    def step(self, x):
        c = self.c
        y = c.b0 * x + self.s1
        self.s1 = c.b1 * x - c.a1 * y + self.s2
        self.s2 = c.b2 * x - c.a2 * y
        return y


class RateDifferentiator:
    """Filter-then-difference angular-acceleration estimate."""

    def __init__(self, coeffs, dt, channels=3):
        self.filter = Biquad(coeffs, channels)
        self.dt = dt
        self.prev = None

    def initialize(self, x0):
        self.filter.initialize(x0)
        self.prev = np.array(x0, dtype=float)

    def step(self, x):
        y = self.filter.step(np.asarray(x, dtype=float))
        if self.prev is None:
            self.prev = y.copy()
        deriv = (y - self.prev) / self.dt
        self.prev = y
        return y, deriv


def filtered_torque(w_f, w_f_prev, dt, params, g1=None, g2=None):
    """Achieved body torque reconstructed from filtered rotor speeds.

    Thrust enters through the square law (the mixing matrix maps thrusts),
    plus the rotor-inertia yaw term from the filtered speed increments.
    """
    if g1 is None or g2 is None:
        g1, g2 = mixing_matrices(params)
    u = params.thrust_coeff * np.square(w_f)
    return g1[1:] @ u + (g2[1:] @ (w_f - w_f_prev)) / dt


def indi_step(u_cmd, rate_deriv_f, torque_f, rates, w_cmd_prev, params,
              g1=None, g2=None, dt=1.0 / 300.0, max_iter=20):
    """Rotor-speed command from thrust commands and filtered measurements.

    Recovers the commanded collective and angular acceleration from the
    mixing map, replaces the model torque with measurement-based
    ``torque_f + I(alpha_cmd - rate_deriv_f)``, and solves the speed-command
    equation by damped Newton from the previous command. Returns
    (w_cmd, converged); non-convergence falls back to the direct square-law
    map of u_cmd.
    """
    if g1 is None or g2 is None:
        g1, g2 = mixing_matrices(params)
    iv = np.asarray(params.inertia)

    wrench_cmd = g1 @ u_cmd
    thrust_cmd = wrench_cmd[0]
    alpha_cmd = (wrench_cmd[1:] - np.cross(rates, iv * rates)) / iv
    torque_des = torque_f + iv * (alpha_cmd - rate_deriv_f)
    rhs = np.concatenate([[thrust_cmd], torque_des])

    w_lo, w_hi = params.speed_limits()
    w_floor = max(w_lo, 1.0)   # keep the square-law Jacobian nonsingular

    ct = params.thrust_coeff
    g2dt = g2 / dt

    def residual(w):
        return g1 @ (ct * w * w) + g2dt @ (w - w_cmd_prev) - rhs

    w = np.clip(np.asarray(w_cmd_prev, dtype=float), w_floor, w_hi)
    r = residual(w)
    rn = np.linalg.norm(r)
    converged = False
    for _ in range(max_iter):
        if abs(r[0]) < 1e-8 and np.max(np.abs(r[1:])) < 1e-10:
            converged = True
            break
        J = g1 * (2.0 * ct * w)[None, :] + g2dt
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        for _ in range(8):
            w_new = np.clip(w + scale * step, w_floor, w_hi)
            r_new = residual(w_new)
            rn_new = np.linalg.norm(r_new)
            if rn_new < rn or np.allclose(w_new, w):
                break
            scale *= 0.5
        if np.allclose(w_new, w):
            # clamped stall: saturation, accept the boxed point
            w, r, rn = w_new, r_new, rn_new
            converged = abs(r[0]) < 1e-8 and np.max(np.abs(r[1:])) < 1e-10
            break
        w, r, rn = w_new, r_new, rn_new
    else:
        converged = abs(r[0]) < 1e-8 and np.max(np.abs(r[1:])) < 1e-10

    if not converged and rn > 1e-6:
        saturating = np.any(np.linalg.solve(g1, rhs) > params.u_max + 1e-9) or \
            np.any(np.linalg.solve(g1, rhs) < params.u_min - 1e-9)
        if not saturating:
            w = np.clip(params.speed_from_thrust(u_cmd), w_lo, w_hi)
            return w, False
    return np.clip(w, w_lo, w_hi), converged


class IndiLoop:
    """Per-vehicle inner-loop state: filters and previous samples."""

    def __init__(self, params, sample_hz=300.0, cutoff_hz=12.0):
        self.params = params
        self.dt = 1.0 / sample_hz
        coeffs = butterworth2(cutoff_hz, sample_hz)
        self.coeffs = coeffs
        self.rate_diff = RateDifferentiator(coeffs, self.dt, channels=3)
        self.speed_filter = Biquad(coeffs, 4)
        self.w_f_prev = None
        self.w_cmd_prev = None
        self._g1, self._g2 = mixing_matrices(params)

    def reset(self, rates, rotor_speeds, w_cmd=None):
        self.rate_diff.initialize(np.asarray(rates, dtype=float))
        self.speed_filter.initialize(np.asarray(rotor_speeds, dtype=float))
        self.w_f_prev = np.array(rotor_speeds, dtype=float)
        self.w_cmd_prev = np.array(rotor_speeds if w_cmd is None else w_cmd,
                                   dtype=float)

    def step(self, u_cmd, rates, rotor_speeds):
        if self.w_cmd_prev is None:
            self.reset(rates, rotor_speeds)
        _, rate_deriv_f = self.rate_diff.step(rates)
        w_f = self.speed_filter.step(np.asarray(rotor_speeds, dtype=float))
        tau_f = filtered_torque(w_f, self.w_f_prev, self.dt, self.params,
                                self._g1, self._g2)
        self.w_f_prev = w_f
        w_cmd, converged = indi_step(u_cmd, rate_deriv_f, tau_f, rates,
                                     self.w_cmd_prev, self.params,
                                     self._g1, self._g2, self.dt)
        self.w_cmd_prev = w_cmd
        return w_cmd, converged
