"""Closed-loop scenario executor.

Wires the plant, the selected outer controller and the inner loop at their
own rates on a common master tick (the least common multiple of the rates),
injects perturbations on the plant side only, and records a plant-rate
flight log plus summary metrics.

Timing model: the plant integrates at its fixed rate; controllers sample
the latest integrated state (zero-order hold, like a real estimator tap).
Pose/velocity/attitude estimates can be delayed by a configured latency;
body rates and rotor speeds pass undelayed.
"""

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import quaternions as quat
from .dfbc import DfbcController, DfbcGains
from .indi import IndiLoop
from .nmpc import NmpcController, OcpConfig, OcpWeights, ReferenceWindow
from .trajectories import flat_to_full, make_sampler
from .vehicle import (
    Disturbance,
    NonFiniteStateError,
    PlantOptions,
    QuadParams,
    QuadState,
    rk4_step_speeds,
)

CRASH_BOX_MARGIN = np.array([5.0, 5.0, 5.0])   # m
CLAMP_POS_RMSE = 5.0                            # m, crashed runs in aggregates
CLAMP_HEADING_RMSE = 90.0                       # deg

STATUS_CODES = {"optimal": 0, "max-iterations": 1, "infeasible": 2,
                "fault": 3, "saturated": 4, "held": 5}


class ConfigError(ValueError):
    """Invalid scenario configuration."""


@dataclass(frozen=True)
class Perturbations:
    """Plant-side mismatch and disturbance settings (controllers keep the
    nominal model)."""

    mass_scale: float = 1.0
    ct_scale: float = 1.0
    cq_scale: float = 1.0
    drag_scale: float = 1.0
    cog_bias_frac: float = 0.0
    ext_force: float = 0.0           # N, inertial x
    ext_moment: float = 0.0          # N m, applied on body x and y
    latency: float = 0.0             # s, pose/velocity/attitude only
    dist_window: tuple = (2.0, 7.0)  # s, external force/moment active window

    def __post_init__(self):
        if self.latency < 0:
            raise ConfigError("latency must be nonnegative")
        if self.dist_window[0] > self.dist_window[1]:
            raise ConfigError("disturbance window must be ordered")


@dataclass
class ScenarioConfig:
    """One benchmark run."""

    trajectory: object               # EllipseSpec | csv path | sampler
    controller: str = "dfbc"         # "dfbc" | "nmpc"
    use_indi: bool = True
    controller_drag_model: bool = True
    plant_drag: bool = True
    plant_gyro_torques: bool = True
    perturbations: Perturbations = field(default_factory=Perturbations)
    duration: float = None           # s; default: one trajectory period (>= 3 s)
    plant_rate: float = 500.0
    control_rate: float = 300.0
    nmpc_rate: float = 100.0
    seed: int = 0
    relax_bounds_factor: float = 1.0  # >1 opens thrust/rate bounds (classifier)
    dfbc_gains: DfbcGains = None
    nmpc_weights: OcpWeights = None
    nmpc_config: OcpConfig = None

    def validate(self):
        if self.controller not in ("dfbc", "nmpc"):
            raise ConfigError(f"unknown controller {self.controller!r}")
        for rate in (self.plant_rate, self.control_rate, self.nmpc_rate):
            if rate <= 0:
                raise ConfigError("rates must be positive")
        if self.control_rate % self.nmpc_rate > 1e-9:
            raise ConfigError("control rate must be an integer multiple of "
                              "the receding-horizon rate")
        if self.relax_bounds_factor < 1.0:
            raise ConfigError("relax_bounds_factor must be >= 1")
        if self.duration is not None and self.duration <= 0:
            raise ConfigError("duration must be positive")


@dataclass
class RunMetrics:
    position_rmse: float
    heading_rmse_deg: float
    crashed: bool
    max_thrust_cmd: float
    status_counts: dict
    solve_time_mean: float
    solve_time_max: float
    n_samples: int
    crash_reason: str = ""

    def clamped_position_rmse(self):
        return CLAMP_POS_RMSE if self.crashed else self.position_rmse

    def clamped_heading_rmse(self):
        return CLAMP_HEADING_RMSE if self.crashed else self.heading_rmse_deg


@dataclass
class FlightLog:
    """Plant-rate time series of one run."""

    t: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    quat: np.ndarray
    rates: np.ndarray
    rotor_speeds: np.ndarray
    ref_pos: np.ndarray
    heading: np.ndarray
    ref_heading: np.ndarray
    u_cmd: np.ndarray
    omega_cmd: np.ndarray
    solver_status: np.ndarray
    solve_time: np.ndarray

    CSV_HEADER = (["t"]
                  + [f"pos_{c}" for c in "xyz"] + [f"vel_{c}" for c in "xyz"]
                  + [f"q{c}" for c in "wxyz"] + [f"rate_{c}" for c in "xyz"]
                  + [f"rotor{i}" for i in range(1, 5)]
                  + [f"ref_pos_{c}" for c in "xyz"]
                  + ["heading", "ref_heading"]
                  + [f"u_cmd{i}" for i in range(1, 5)]
                  + [f"omega_cmd{i}" for i in range(1, 5)]
                  + ["solver_status", "solve_time"])

    def same_trajectory(self, other):
        """Bit-identical dynamical content (timing diagnostics excluded)."""
        fields = ("t", "pos", "vel", "quat", "rates", "rotor_speeds",
                  "ref_pos", "heading", "ref_heading", "u_cmd", "omega_cmd",
                  "solver_status")
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in fields)

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_HEADER)
            for i in range(self.t.size):
                row = ([self.t[i]] + list(self.pos[i]) + list(self.vel[i])
                       + list(self.quat[i]) + list(self.rates[i])
                       + list(self.rotor_speeds[i]) + list(self.ref_pos[i])
                       + [self.heading[i], self.ref_heading[i]]
                       + list(self.u_cmd[i]) + list(self.omega_cmd[i])
                       + [int(self.solver_status[i]), self.solve_time[i]])
                writer.writerow([f"{v:.12g}" if isinstance(v, float) else v
                                 for v in row])


def heading_of(q):
    """Heading from the horizontal projection of the body-x axis."""
    xb = quat.rotmat(q)[:, 0]
    return math.atan2(xb[1], xb[0])


def detect_crash(pos, bounds_lo, bounds_hi):
    """Spatial crash criterion: outside the reference box inflated by 5 m."""
    return bool(np.any(pos < bounds_lo - CRASH_BOX_MARGIN)
                or np.any(pos > bounds_hi + CRASH_BOX_MARGIN))


def wrap_angle(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def compute_metrics(log, crashed=False, crash_reason="", max_thrust_cmd=None,
                    status_counts=None):
    """Position/heading RMSE and run summary from a flight log."""
    err = log.pos - log.ref_pos
    pos_rmse = float(np.sqrt(np.mean(np.sum(err * err, axis=1))))
    herr = wrap_angle(log.heading - log.ref_heading)
    heading_rmse = float(np.degrees(np.sqrt(np.mean(herr * herr))))
    solve = log.solve_time[log.solve_time > 0]
    return RunMetrics(
        position_rmse=pos_rmse,
        heading_rmse_deg=heading_rmse,
        crashed=crashed,
        max_thrust_cmd=(float(np.max(log.u_cmd)) if max_thrust_cmd is None
                        else max_thrust_cmd),
        status_counts=status_counts or {},
        solve_time_mean=float(solve.mean()) if solve.size else 0.0,
        solve_time_max=float(solve.max()) if solve.size else 0.0,
        n_samples=int(log.t.size),
        crash_reason=crash_reason,
    )


def default_duration(sampler, perturbations):
    period = sampler.period
    if perturbations.ext_force != 0.0 or perturbations.ext_moment != 0.0:
        return max(period, perturbations.dist_window[1] + 2.0)
    return max(period, 3.0)


def _plant_params(nominal, pert):
    return nominal.perturbed(mass_scale=pert.mass_scale, ct_scale=pert.ct_scale,
                             cq_scale=pert.cq_scale, drag_scale=pert.drag_scale)


def run_scenario(cfg, params=None):
    """Execute one scenario; returns (FlightLog, RunMetrics)."""
    cfg.validate()
    nominal = params or QuadParams()
    pert = cfg.perturbations
    plant_params = _plant_params(nominal, pert)

    sampler = make_sampler(cfg.trajectory)
    duration = cfg.duration if cfg.duration is not None else \
        default_duration(sampler, pert)
    bounds_lo, bounds_hi = sampler.position_bounds()

    relax = cfg.relax_bounds_factor
    u_max_ctrl = nominal.u_max * relax
    rate_bound_scale = relax

    # plant-side physical rotor-speed box comes from the nominal motor limits
    w_lims = (math.sqrt(nominal.u_min / nominal.thrust_coeff),
              math.sqrt(u_max_ctrl / nominal.thrust_coeff))
    plant_opts = PlantOptions(drag=cfg.plant_drag,
                              gyro_torques=cfg.plant_gyro_torques,
                              cog_bias_frac=pert.cog_bias_frac,
                              speed_limits=w_lims)

    dist = Disturbance(
        force=np.array([pert.ext_force, 0.0, 0.0]),
        torque=np.array([pert.ext_moment, pert.ext_moment, 0.0]),
        t_on=pert.dist_window[0] if (pert.ext_force or pert.ext_moment) else 0.0,
        t_off=pert.dist_window[1] if (pert.ext_force or pert.ext_moment) else 0.0,
    )

    # controller-side params stay nominal, with relaxed bounds when classifying
    ctrl_params = nominal if relax == 1.0 else replace(nominal, u_max=u_max_ctrl)

    # master tick schedule
    master = _lcm_rate(cfg.plant_rate, cfg.control_rate)
    plant_every = int(round(master / cfg.plant_rate))
    ctrl_every = int(round(master / cfg.control_rate))
    nmpc_every = int(round(ctrl_every * cfg.control_rate / cfg.nmpc_rate))
    dt_plant = 1.0 / cfg.plant_rate
    n_plant = int(round(duration * cfg.plant_rate))
    n_ticks = n_plant * plant_every

    # initial state: on the trajectory with matched rotor speeds
    ref0 = flat_to_full(sampler.sample(0.0), nominal,
                        drag=cfg.controller_drag_model)
    u0 = np.clip(ref0.rotor_thrusts, nominal.u_min, u_max_ctrl)
    x = np.concatenate([ref0.pos, ref0.vel, ref0.quat, ref0.rates,
                        nominal.speed_from_thrust(u0)])

    # controllers
    if cfg.controller == "dfbc":
        ctrl = DfbcController(ctrl_params, gains=cfg.dfbc_gains,
                              drag_model=cfg.controller_drag_model)
        nmpc = None
        ref_points = [sampler.sample(k / cfg.control_rate)
                      for k in range(int(duration * cfg.control_rate) + 2)]
    else:
        ocp = cfg.nmpc_config or OcpConfig(drag_model=cfg.controller_drag_model)
        if rate_bound_scale != 1.0:
            ocp = replace(ocp, rate_bound=ocp.rate_bound * rate_bound_scale)
        nmpc = NmpcController(ctrl_params, weights=cfg.nmpc_weights, config=ocp)
        ctrl = None
        # full reference grid at the receding-horizon control period
        nmpc_period = 1.0 / cfg.nmpc_rate
        stride = ocp.dt / nmpc_period
        if abs(stride - round(stride)) > 1e-9:
            raise ConfigError("horizon step must be a multiple of the "
                              "receding-horizon control period")
        stride = int(round(stride))
        n_grid = int(round((duration + ocp.horizon * ocp.dt) / nmpc_period)) + 2
        full_refs = [flat_to_full(sampler.sample(k * nmpc_period), nominal,
                                  drag=cfg.controller_drag_model)
                     for k in range(n_grid)]
        ref_states = np.array([np.concatenate([r.pos, r.vel, r.quat, r.rates])
                               for r in full_refs])
        ref_inputs = np.array([np.clip(r.rotor_thrusts, nominal.u_min, u_max_ctrl)
                               for r in full_refs])

    indi = IndiLoop(ctrl_params, sample_hz=cfg.control_rate) if cfg.use_indi \
        else None
    if indi:
        indi.reset(x[10:13], x[13:17])

    # logs at plant rate
    n_log = n_plant + 1
    log = FlightLog(
        t=np.zeros(n_log), pos=np.zeros((n_log, 3)), vel=np.zeros((n_log, 3)),
        quat=np.zeros((n_log, 4)), rates=np.zeros((n_log, 3)),
        rotor_speeds=np.zeros((n_log, 4)), ref_pos=np.zeros((n_log, 3)),
        heading=np.zeros(n_log), ref_heading=np.zeros(n_log),
        u_cmd=np.zeros((n_log, 4)), omega_cmd=np.zeros((n_log, 4)),
        solver_status=np.zeros(n_log, dtype=np.int8), solve_time=np.zeros(n_log),
    )

    u_cmd = u0.copy()
    w_cmd = x[13:17].copy()
    status_code = 0
    solve_time = 0.0
    status_counts = {}
    crashed = False
    crash_reason = ""
    max_u_cmd = float(np.max(u_cmd))
    latency_steps = int(round(pert.latency * cfg.plant_rate))

    def log_sample(i, t):
        log.t[i] = t
        log.pos[i] = x[0:3]
        log.vel[i] = x[3:6]
        log.quat[i] = x[6:10]
        log.rates[i] = x[10:13]
        log.rotor_speeds[i] = x[13:17]
        p = sampler.sample(t)
        log.ref_pos[i] = p.pos
        log.heading[i] = heading_of(x[6:10])
        log.ref_heading[i] = p.heading
        log.u_cmd[i] = u_cmd
        log.omega_cmd[i] = w_cmd
        log.solver_status[i] = status_code
        log.solve_time[i] = solve_time

    def estimate(tick, i_plant):
        """Controller-visible state: pose/vel/attitude possibly stale."""
        if latency_steps == 0:
            return QuadState.from_vector(x)
        j = max(i_plant - latency_steps, 0)
        return QuadState(log.pos[j].copy(), log.vel[j].copy(),
                         log.quat[j].copy(), x[10:13].copy(), x[13:17].copy())

    log_sample(0, 0.0)
    i_plant = 0

    for tick in range(n_ticks + 1):
        t = tick / master
        if tick > 0 and tick % plant_every == 0:
            try:
                x = rk4_step_speeds(x, w_cmd, plant_params, dist,
                                    t - dt_plant, dt_plant, plant_opts)
            except NonFiniteStateError as exc:
                crashed, crash_reason = True, f"plant fault: {exc}"
                break
            i_plant += 1
            log_sample(i_plant, t)
            if detect_crash(x[0:3], bounds_lo, bounds_hi):
                crashed, crash_reason = True, "left the reference box"
                break
        if tick % ctrl_every == 0 and tick < n_ticks:
            est = estimate(tick, i_plant)
            try:
                if nmpc is not None:
                    if tick % nmpc_every == 0:
                        k0 = int(round(t * cfg.nmpc_rate))
                        window = ReferenceWindow(
                            ref_states[k0:k0 + stride * (nmpc.config.horizon + 1) + 1:stride],
                            ref_inputs[k0:k0 + stride * nmpc.config.horizon + 1:stride])
                        x13 = np.concatenate([est.pos, est.vel, est.quat,
                                              est.rates])
                        t0 = time.perf_counter()
                        sol = nmpc.step(x13, window,
                                        elapsed=(0.0 if tick == 0
                                                 else 1.0 / cfg.nmpc_rate))
                        solve_time = time.perf_counter() - t0
                        if sol.status in ("infeasible", "fault",
                                          "max-iterations"):
                            status_code = STATUS_CODES.get(sol.status, 5)
                        else:
                            status_code = STATUS_CODES["optimal"]
                        u_cmd = sol.u0
                        max_u_cmd = max(max_u_cmd, float(np.max(u_cmd)))
                        status_counts[status_code] = \
                            status_counts.get(status_code, 0) + 1
                else:
                    t0 = time.perf_counter()
                    k = int(round(t * cfg.control_rate))
                    cmd = ctrl.command(est, ref_points[k])
                    solve_time = time.perf_counter() - t0
                    u_cmd = cmd.rotor_thrusts
                    status_code = STATUS_CODES["saturated"] if cmd.saturated \
                        else STATUS_CODES["optimal"]
                    max_u_cmd = max(max_u_cmd, float(np.max(u_cmd)))
                    status_counts[status_code] = \
                        status_counts.get(status_code, 0) + 1
                if indi is not None:
                    w_cmd, _ = indi.step(u_cmd, est.rates, est.rotor_speeds)
                else:
                    w_cmd = np.clip(ctrl_params.speed_from_thrust(u_cmd),
                                    *w_lims)
            except (ValueError, FloatingPointError, NonFiniteStateError) as exc:
                crashed, crash_reason = True, f"controller fault: {exc}"
                break

    # truncate the log if the run ended early
    n_kept = i_plant + 1
    for name in ("t", "pos", "vel", "quat", "rates", "rotor_speeds", "ref_pos",
                 "heading", "ref_heading", "u_cmd", "omega_cmd",
                 "solver_status", "solve_time"):
        setattr(log, name, getattr(log, name)[:n_kept])

    metrics = compute_metrics(log, crashed, crash_reason, max_u_cmd,
                              status_counts)
    return log, metrics


def _lcm_rate(a, b):
    ai, bi = int(round(a)), int(round(b))
    if abs(a - ai) > 1e-9 or abs(b - bi) > 1e-9:
        raise ConfigError("rates must be integral Hz")
    return math.lcm(ai, bi)
