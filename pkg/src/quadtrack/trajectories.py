"""Elliptical reference trajectories, flat-output sampling, and the
differential-flatness expansion to full reference states and rotor thrusts.

Horizontal ellipses run in the x-y plane at the configured height with the
heading pointing at the ellipse center; vertical ellipses run in the x-z
plane with a constant heading, fixed to +y (perpendicular to the loop plane)
so the attitude construction stays away from its singularity even through
inverted segments.
"""

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import quaternions as quat
from .vehicle import drag_force_body, mixing_matrices

Z_I = np.array([0.0, 0.0, 1.0])
THRUST_EPS = 1e-3   # N; degenerate (free-fall) threshold, far below hover


@dataclass(frozen=True)
class EllipseSpec:
    """One member of the benchmark trajectory family."""

    v_max: float
    a_max: float
    ellipticity: float = 1.0
    plane: str = "horizontal"        # "horizontal" | "vertical"
    center_height: float = 5.0
    heading_mode: str = "center"     # "center" | "constant" (vertical: always constant)
    constant_heading: float = None   # rad; default 0 horizontal, pi/2 vertical

    def __post_init__(self):
        if self.v_max <= 0 or self.a_max <= 0 or self.ellipticity < 1:
            raise ValueError("require v_max > 0, a_max > 0, ellipticity >= 1")
        if self.plane not in ("horizontal", "vertical"):
            raise ValueError("plane must be horizontal or vertical")
        if self.heading_mode not in ("center", "constant"):
            raise ValueError("heading_mode must be center or constant")

    @property
    def r_max(self):
        return self.v_max ** 2 / self.a_max

    @property
    def r_min(self):
        return self.r_max / self.ellipticity

    @property
    def angular_rate(self):
        return self.a_max / self.v_max

    @property
    def period(self):
        return 2.0 * math.pi / self.angular_rate

    @property
    def heading_value(self):
        if self.constant_heading is not None:
            return self.constant_heading
        return 0.5 * math.pi if self.plane == "vertical" else 0.0

    def position_bounds(self):
        """(inf, sup) of the reference position over the whole trajectory."""
        lo = np.empty(3)
        hi = np.empty(3)
        if self.plane == "horizontal":
            lo[:] = (-self.r_max, -self.r_min, self.center_height)
            hi[:] = (self.r_max, self.r_min, self.center_height)
        else:
            lo[:] = (-self.r_max, 0.0, self.center_height - self.r_min)
            hi[:] = (self.r_max, 0.0, self.center_height + self.r_min)
        return lo, hi

    def label(self):
        return f"{self.plane[:4]}_a{self.a_max:g}_v{self.v_max:g}_n{self.ellipticity:g}"


@dataclass
class ReferencePoint:
    """Flat outputs and derivatives at one instant."""

    pos: np.ndarray
    vel: np.ndarray
    acc: np.ndarray
    jerk: np.ndarray
    snap: np.ndarray
    heading: float = 0.0
    heading_rate: float = 0.0
    heading_acc: float = 0.0

    @classmethod
    def hover(cls, pos=(0.0, 0.0, 0.0), heading=0.0):
        z = np.zeros(3)
        return cls(np.array(pos, dtype=float), z.copy(), z.copy(), z.copy(),
                   z.copy(), heading)


@dataclass
class FullReference:
    """Reference state (minus rotor speeds) plus reference rotor thrusts."""

    pos: np.ndarray
    vel: np.ndarray
    quat: np.ndarray
    rates: np.ndarray                # body frame
    rotor_thrusts: np.ndarray        # may exceed bounds for infeasible refs
    collective: float
    ang_accel: np.ndarray = None     # body frame, kept for diagnostics


def sample_ellipse(spec, t):
    """Flat outputs with analytic derivatives up to snap at time t."""
    k = spec.angular_rate
    rx, rn = spec.r_max, spec.r_min
    s, c = math.sin(k * t), math.cos(k * t)
    ax = np.array([rx * s, rx * k * c, -rx * k**2 * s, -rx * k**3 * c, rx * k**4 * s])
    ay = np.array([rn * c, -rn * k * s, -rn * k**2 * c, rn * k**3 * s, rn * k**4 * c])

    if spec.plane == "horizontal":
        pos = np.array([ax[0], ay[0], spec.center_height])
        vel = np.array([ax[1], ay[1], 0.0])
        acc = np.array([ax[2], ay[2], 0.0])
        jerk = np.array([ax[3], ay[3], 0.0])
        snap = np.array([ax[4], ay[4], 0.0])
    else:
        pos = np.array([ax[0], 0.0, spec.center_height + ay[0]])
        vel = np.array([ax[1], 0.0, ay[1]])
        acc = np.array([ax[2], 0.0, ay[2]])
        jerk = np.array([ax[3], 0.0, ay[3]])
        snap = np.array([ax[4], 0.0, ay[4]])

    if spec.plane == "horizontal" and spec.heading_mode == "center":
        # point at the ellipse center: psi = atan2(-y, -x); derivatives from
        # the closed-form d(atan2)/dt on the parametrization
        psi = math.atan2(-ay[0], -ax[0])
        d = ax[0] ** 2 + ay[0] ** 2
        psi_dot = -rx * rn * k / d
        d_dot = 2.0 * (ax[0] * ax[1] + ay[0] * ay[1])
        psi_ddot = rx * rn * k * d_dot / d**2
        return ReferencePoint(pos, vel, acc, jerk, snap, psi, psi_dot, psi_ddot)

    return ReferencePoint(pos, vel, acc, jerk, snap, spec.heading_value, 0.0, 0.0)


def _attitude_from_thrust(z_b, heading):
    x_c = np.array([math.cos(heading), math.sin(heading), 0.0])
    y_dir = np.cross(z_b, x_c)
    ny = np.linalg.norm(y_dir)
    if ny < 1e-6:
        raise ValueError("thrust axis parallel to the heading axis; "
                         "attitude construction is singular")
    y_b = y_dir / ny
    x_b = np.cross(y_b, z_b)
    return np.column_stack([x_b, y_b, z_b])


def _solve_thrust_vector(f_base, vel, heading, params):
    """Thrust vector consistent with the body-frame drag it induces.

    Solves tv = f_base - R(tv) fa(R(tv)' vel) by damped Newton with a
    finite-difference Jacobian. Plain fixed-point iteration is not
    contractive at low-thrust high-speed points (the velocity-squared drag
    term there rivals the thrust), so a root solve is required.
    """
    def residual(tv):
        tn = np.linalg.norm(tv)
        if tn < 1e-9:
            return None
        try:
            R = _attitude_from_thrust(tv / tn, heading)
        except ValueError:
            return None
        return tv - f_base + R @ drag_force_body(R.T @ vel, params)

    # drag-aware seed (level-attitude drag), then a few plain sweeps
    tv = f_base - drag_force_body(vel, params)
    if np.linalg.norm(tv) < THRUST_EPS:
        tv = f_base + np.array([0.0, 0.0, 0.01])
    for _ in range(3):
        r = residual(tv)
        if r is None:
            break
        cand = tv - r
        if residual(cand) is None:
            break
        tv = cand

    r = residual(tv)
    if r is None:
        raise RuntimeError("thrust-vector solve could not start")
    for _ in range(60):
        rn = np.linalg.norm(r)
        if rn < 1e-10:
            return tv
        J = np.empty((3, 3))
        h = 1e-7 * max(np.linalg.norm(tv), 1e-3)
        for i in range(3):
            dv = tv.copy()
            dv[i] += h
            ri = residual(dv)
            if ri is None:
                dv[i] -= 2.0 * h
                ri = residual(dv)
                if ri is None:
                    raise RuntimeError("thrust-vector solve stalled (jacobian)")
                J[:, i] = (r - ri) / h
            else:
                J[:, i] = (ri - r) / h
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            step = -r
        scale = 1.0
        improved = False
        for _ in range(12):
            rc = residual(tv + scale * step)
            if rc is not None and np.linalg.norm(rc) < rn:
                tv = tv + scale * step
                r = rc
                improved = True
                break
            scale *= 0.5
        if not improved:
            raise RuntimeError("thrust-vector solve stalled")
    raise RuntimeError("thrust-vector solve did not converge")


def flat_to_full(point, params, drag=True):
    """Expand a flat-output point into attitude, body rates, angular
    acceleration and rotor thrusts.

    The thrust vector and attitude are solved jointly with the body-frame
    drag force by fixed-point iteration (the drag correction is small
    relative to thrust everywhere the expansion is defined).
    """
    m = params.mass
    g_vec = np.array([0.0, 0.0, -params.gravity])
    f_base = m * (point.acc - g_vec)

    thrust_vec = f_base.copy()
    if drag:
        try:
            thrust_vec = _solve_thrust_vector(f_base, point.vel, point.heading,
                                              params)
        except RuntimeError:
            # no drag-consistent solution (drag rivals the required force near
            # free-fall flips); take one pass of drag at the drag-free attitude
            fn = np.linalg.norm(f_base)
            if fn < THRUST_EPS:
                raise ValueError("degenerate (free-fall) reference point")
            R0 = _attitude_from_thrust(f_base / fn, point.heading)
            thrust_vec = f_base - R0 @ drag_force_body(R0.T @ point.vel, params)
    tn = np.linalg.norm(thrust_vec)
    if tn < THRUST_EPS:
        raise ValueError("degenerate (free-fall) reference point")
    R = _attitude_from_thrust(thrust_vec / tn, point.heading)

    x_b, y_b, z_b = R[:, 0], R[:, 1], R[:, 2]
    T = tn
    # floor the divisor so rate/acceleration feedforward stays bounded while
    # the thrust magnitude passes near zero on barely-inverting trajectories
    T_div = max(T, 0.05 * m * params.gravity)

    # angular velocity from the jerk, then angular acceleration from the snap
    t_dot = m * np.dot(point.jerk, z_b)
    h_w = (m * point.jerk - t_dot * z_b) / T_div
    rates = np.array([-np.dot(h_w, y_b),
                      np.dot(h_w, x_b),
                      point.heading_rate * z_b[2]])
    omega_inertial = R @ rates

    t_ddot = m * np.dot(point.snap, z_b) + m * np.dot(np.cross(omega_inertial, z_b),
                                                      point.jerk)
    h_a = (m / T_div) * point.snap - (np.cross(omega_inertial, np.cross(omega_inertial, z_b))
                                      + (2.0 * t_dot / T_div) * np.cross(omega_inertial, z_b)
                                      + (t_ddot / T_div) * z_b)
    ang_accel = np.array([-np.dot(h_a, y_b),
                          np.dot(h_a, x_b),
                          point.heading_acc * z_b[2]])

    g1, _ = mixing_matrices(params)
    iv = np.asarray(params.inertia)
    torque = iv * ang_accel + np.cross(rates, iv * rates)
    u = np.linalg.solve(g1, np.concatenate([[T], torque]))

    return FullReference(point.pos.copy(), point.vel.copy(), quat.from_rotmat(R),
                         rates, u, float(T), ang_accel)


def trajectory_grid():
    """The 144-member benchmark family (both planes x 6 accelerations x
    3 ellipticities x 4 speeds)."""
    specs = []
    for plane in ("horizontal", "vertical"):
        for a in (10.0, 20.0, 30.0, 40.0, 50.0, 60.0):
            for n in (1.0, 2.0, 5.0):
                for v in (5.0, 10.0, 15.0, 20.0):
                    specs.append(EllipseSpec(v_max=v, a_max=a, ellipticity=n,
                                             plane=plane))
    return specs


@dataclass
class FeasibilityResult:
    feasible: bool
    max_thrust: float


def classify_feasibility(spec, params=None, relax_factor=10.0, duration=None):
    """Dynamic-feasibility check via closed-loop tracking with relaxed limits.

    The receding-horizon controller runs with thrust (and rate) bounds opened
    up by ``relax_factor``; the trajectory is infeasible iff any applied
    per-rotor thrust command exceeds the real u_max. Threshold is u_max
    exactly, no margin.
    """
    from .sim import ScenarioConfig, run_scenario
    from .vehicle import QuadParams

    params = params or QuadParams()
    cfg = ScenarioConfig(trajectory=spec, controller="nmpc",
                         duration=duration if duration is not None else max(spec.period, 2.0),
                         relax_bounds_factor=relax_factor)
    log, metrics = run_scenario(cfg, params=params)
    if metrics.crashed:
        raise RuntimeError(f"classification run crashed for {spec.label()}: "
                           f"{metrics.crash_reason}")
    return FeasibilityResult(bool(metrics.max_thrust_cmd <= params.u_max),
                             float(metrics.max_thrust_cmd))


# -- trajectory samplers and CSV interchange ---------------------------------

CSV_COLUMNS = (["t"]
               + [f"pos_{c}" for c in "xyz"] + [f"vel_{c}" for c in "xyz"]
               + [f"acc_{c}" for c in "xyz"] + [f"jerk_{c}" for c in "xyz"]
               + [f"snap_{c}" for c in "xyz"]
               + ["heading", "heading_rate", "heading_acc"])


class EllipseSampler:
    """Analytic sampler; periodic, defined for all t >= 0."""

    def __init__(self, spec):
        self.spec = spec

    def sample(self, t):
        return sample_ellipse(self.spec, t)

    @property
    def period(self):
        return self.spec.period

    def position_bounds(self):
        return self.spec.position_bounds()


class TabulatedSampler:
    """Linear interpolation over an imported sample table; clamps past the
    final point so horizon lookups beyond the end are deterministic."""

    def __init__(self, table):
        self.t = table[:, 0]
        if self.t.size < 2 or np.any(np.diff(self.t) <= 0):
            raise ValueError("trajectory table needs strictly increasing time")
        self.data = table[:, 1:]
        # interpolate a continuous heading
        self.data = self.data.copy()
        self.data[:, 15] = np.unwrap(self.data[:, 15])

    @classmethod
    def load_csv(cls, path):
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"trajectory csv missing columns: {sorted(missing)}")
            for row in reader:
                rows.append([float(row[c]) for c in CSV_COLUMNS])
        return cls(np.array(rows))

    def sample(self, t):
        tq = min(max(t, self.t[0]), self.t[-1])
        vals = np.array([np.interp(tq, self.t, self.data[:, j])
                         for j in range(self.data.shape[1])])
        return ReferencePoint(vals[0:3], vals[3:6], vals[6:9], vals[9:12],
                              vals[12:15], vals[15], vals[16], vals[17])

    @property
    def period(self):
        return float(self.t[-1] - self.t[0])

    def position_bounds(self):
        pos = self.data[:, 0:3]
        return pos.min(axis=0), pos.max(axis=0)


def export_csv(sampler, path, t_end=None, rate=100.0):
    """Write a sampler to the interchange CSV schema."""
    t_end = t_end if t_end is not None else sampler.period
    times = np.arange(0.0, t_end, 1.0 / rate)
    times = np.append(times, t_end)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for t in times:
            p = sampler.sample(t)
            writer.writerow([f"{v:.12g}" for v in
                             [t, *p.pos, *p.vel, *p.acc, *p.jerk, *p.snap,
                              p.heading, p.heading_rate, p.heading_acc]])


def make_sampler(trajectory):
    if isinstance(trajectory, EllipseSpec):
        return EllipseSampler(trajectory)
    if isinstance(trajectory, str):
        return TabulatedSampler.load_csv(trajectory)
    if hasattr(trajectory, "sample"):
        return trajectory
    raise TypeError("trajectory must be an EllipseSpec, a csv path, or a sampler")
