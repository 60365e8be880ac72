"""Full-state receding-horizon tracking controller.

Multiple-shooting discretization of the tracking optimal-control problem,
one Gauss-Newton SQP iteration per control cycle (real-time iteration),
condensed to a dense QP in the stacked thrust inputs with box bounds and
linearized body-rate rows, solved by the active-set QP. The prediction
model is the 13-state rigid body (position, velocity, quaternion, body
rates) with per-rotor thrusts as inputs; rotor-speed lag and the
rotor-inertia torque terms are deliberately not modeled.

State layout: [pos 0:3, vel 3:6, quat 6:10, rates 10:13].
"""

from dataclasses import dataclass, field

import numpy as np

from . import quaternions as quat
from .qp import ActiveSetQp, QpProblem
from .vehicle import mixing_matrices

NX = 13
NU = 4


@dataclass(frozen=True)
class OcpWeights:
    pos: tuple = (200.0, 200.0, 500.0)
    vel: tuple = (1.0, 1.0, 1.0)
    att: tuple = (5.0, 5.0, 200.0)       # on the quaternion-error 3-vector
    rate: tuple = (1.0, 1.0, 1.0)
    input: tuple = (6.0, 6.0, 6.0, 6.0)

    def state_diag(self):
        return np.array(self.pos + self.vel + self.att + self.rate)


@dataclass(frozen=True)
class OcpConfig:
    horizon: int = 20
    dt: float = 0.05
    rate_bound: float = 10.0             # rad/s per axis; value not prescribed
    sqp_iterations: int = 1
    integrator_substeps: int = 1
    drag_model: bool = True

    def __post_init__(self):
        if self.horizon < 1 or self.dt <= 0 or self.integrator_substeps < 1:
            raise ValueError("invalid horizon configuration")


def quat_error(q, q_ref):
    """Imaginary part of q ⊗ q_ref^-1 (small-angle attitude error vector)."""
    return quat.multiply(q, quat.conjugate(q_ref))[1:]


def quat_error_matrix(q_ref):
    """E with quat_error(q, q_ref) = E q (the error map is linear in q)."""
    return quat.right_matrix(quat.conjugate(q_ref))[1:, :]


class _Model:
    """Continuous dynamics and analytic Jacobians for the prediction model."""

    def __init__(self, params, drag=True):
        self.params = params
        self.drag = drag
        g1, _ = mixing_matrices(params)
        self.g1_torque = g1[1:]
        self.inv_inertia = 1.0 / np.asarray(params.inertia)
        self.inertia = np.asarray(params.inertia)
        self.grav = np.array([0.0, 0.0, -params.gravity])

    def f(self, x, u):
        p = self.params
        v, q, w = x[3:6], x[6:10], x[10:13]
        R = quat.rotmat(q)
        force_body = np.array([0.0, 0.0, np.sum(u)])
        if self.drag:
            vb = R.T @ v
            kx, ky, kz = p.drag_coeffs
            force_body = force_body + np.array([
                -kx * vb[0], -ky * vb[1],
                -kz * vb[2] + p.drag_kh * (vb[0] ** 2 + vb[1] ** 2)])
        out = np.empty(NX)
        out[0:3] = v
        out[3:6] = R @ force_body / p.mass + self.grav
        out[6:10] = 0.5 * quat.multiply(q, np.concatenate(([0.0], w)))
        iw = self.inertia * w
        out[10:13] = self.inv_inertia * (self.g1_torque @ u - np.cross(w, iw))
        return out

    def f_jac(self, x, u):
        """(f, A, B) with A = df/dx, B = df/du."""
        p = self.params
        v, q, w = x[3:6], x[6:10], x[10:13]
        qw, qx, qy, qz = q
        R = quat.rotmat(q)

        dR = _rotmat_partials(qw, qx, qy, qz)

        force_body = np.array([0.0, 0.0, np.sum(u)])
        J_fb_vb = None
        if self.drag:
            vb = R.T @ v
            kx, ky, kz = p.drag_coeffs
            force_body = force_body + np.array([
                -kx * vb[0], -ky * vb[1],
                -kz * vb[2] + p.drag_kh * (vb[0] ** 2 + vb[1] ** 2)])
            J_fb_vb = np.array([[-kx, 0.0, 0.0],
                                [0.0, -ky, 0.0],
                                [2 * p.drag_kh * vb[0], 2 * p.drag_kh * vb[1], -kz]])

        A = np.zeros((NX, NX))
        B = np.zeros((NX, NU))
        fx = np.empty(NX)

        fx[0:3] = v
        A[0:3, 3:6] = np.eye(3)

        fx[3:6] = R @ force_body / p.mass + self.grav
        # d(accel)/dq: dR/dq_i force_body + R dforce/dvb dR/dq_i^T v
        for i in range(4):
            col = dR[i] @ force_body
            if self.drag:
                col = col + R @ (J_fb_vb @ (dR[i].T @ v))
            A[3:6, 6 + i] = col / p.mass
        if self.drag:
            A[3:6, 3:6] = R @ J_fb_vb @ R.T / p.mass
        B[3:6, :] = (R[:, 2] / p.mass)[:, None]

        fx[6:10] = 0.5 * quat.multiply(q, np.concatenate(([0.0], w)))
        wx, wy, wz = w
        A[6:10, 6:10] = 0.5 * np.array([
            [0.0, -wx, -wy, -wz],
            [wx, 0.0, wz, -wy],
            [wy, -wz, 0.0, wx],
            [wz, wy, -wx, 0.0],
        ])
        A[6:10, 10:13] = 0.5 * np.array([
            [-qx, -qy, -qz],
            [qw, -qz, qy],
            [qz, qw, -qx],
            [-qy, qx, qw],
        ])

        iw = self.inertia * w
        fx[10:13] = self.inv_inertia * (self.g1_torque @ u - np.cross(w, iw))
        A[10:13, 10:13] = self.inv_inertia[:, None] * (
            _skew(iw) - _skew(w) @ np.diag(self.inertia))
        B[10:13, :] = self.inv_inertia[:, None] * self.g1_torque
        return fx, A, B


def _skew(a):
    return np.array([[0.0, -a[2], a[1]],
                     [a[2], 0.0, -a[0]],
                     [-a[1], a[0], 0.0]])


def _rotmat_partials(w, x, y, z):
    return (
        2.0 * np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]]),
        2.0 * np.array([[0.0, y, z], [y, -2 * x, -w], [z, w, -2 * x]]),
        2.0 * np.array([[-2 * y, x, w], [x, 0.0, z], [-w, z, -2 * y]]),
        2.0 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0.0]]),
    )


def shoot(x, u, config, model, with_sensitivities=True):
    """Integrate one shooting interval (RK4, quaternion renormalized) and
    propagate exact forward sensitivities of the discrete map."""
    h = config.dt / config.integrator_substeps
    Sx = np.eye(NX)
    Su = np.zeros((NX, NU))
    for _ in range(config.integrator_substeps):
        if with_sensitivities:
            k1, a1, b1 = model.f_jac(x, u)
            x2 = x + 0.5 * h * k1
            k2, a2, b2 = model.f_jac(x2, u)
            x3 = x + 0.5 * h * k2
            k3, a3, b3 = model.f_jac(x3, u)
            x4 = x + h * k3
            k4, a4, b4 = model.f_jac(x4, u)

            K1x, K1u = a1, b1
            K2x = a2 @ (np.eye(NX) + 0.5 * h * K1x)
            K2u = a2 @ (0.5 * h * K1u) + b2
            K3x = a3 @ (np.eye(NX) + 0.5 * h * K2x)
            K3u = a3 @ (0.5 * h * K2u) + b3
            K4x = a4 @ (np.eye(NX) + h * K3x)
            K4u = a4 @ (h * K3u) + b4

            step_x = np.eye(NX) + (h / 6.0) * (K1x + 2 * K2x + 2 * K3x + K4x)
            step_u = (h / 6.0) * (K1u + 2 * K2u + 2 * K3u + K4u)
            Sx = step_x @ Sx
            Su = step_x @ Su + step_u
        else:
            k1 = model.f(x, u)
            k2 = model.f(x + 0.5 * h * k1, u)
            k3 = model.f(x + 0.5 * h * k2, u)
            k4 = model.f(x + h * k3, u)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite shooting propagation")

    qn = x[6:10]
    norm = np.linalg.norm(qn)
    x = x.copy()
    x[6:10] = qn / norm
    if with_sensitivities:
        Jn = np.eye(NX)
        Jn[6:10, 6:10] = (np.eye(4) - np.outer(x[6:10], x[6:10])) / norm
        Sx = Jn @ Sx
        Su = Jn @ Su
        return x, Sx, Su
    return x, None, None


@dataclass
class NmpcSolution:
    u0: np.ndarray
    states: np.ndarray                # (N+1, 13) updated guess
    inputs: np.ndarray                # (N, 4)
    status: str                       # "optimal" | "max-iterations" | "infeasible" | "fault"
    kkt_residual: float = np.nan
    qp_iterations: int = 0
    qp_objective_start: float = np.nan
    qp_objective: float = np.nan


class NmpcController:
    """Receding-horizon controller instance owning its warm-start state."""

    def __init__(self, params, weights=None, config=None,
                 u_min=None, u_max=None):
        self.params = params
        self.weights = weights or OcpWeights()
        self.config = config or OcpConfig()
        self.u_min = params.u_min if u_min is None else u_min
        self.u_max = params.u_max if u_max is None else u_max
        self.model = _Model(params, drag=self.config.drag_model)
        self.solver = ActiveSetQp(max_iter=200)
        self.X = None                 # (N+1, NX) guess
        self.U = None                 # (N, NU) guess
        self._qp_active = None
        self._carry = 0.0             # trajectory time since last node shift

    # -- warm start management -----------------------------------------------

    def initialize(self, window):
        """Seed the guess from a reference window (states + inputs)."""
        N = self.config.horizon
        self.X = np.array([window.state(k) for k in range(N + 1)])
        self.U = np.array([np.clip(window.input(k), self.u_min, self.u_max)
                           for k in range(N)])
        self._qp_active = None
        self._carry = 0.0

    def _shift(self, steps):
        N = self.config.horizon
        steps = min(steps, N)
        if steps <= 0:
            return
        self.X[:-steps] = self.X[steps:]
        self.U[:-steps] = self.U[steps:]
        for k in range(N - steps, N):
            self.U[k] = self.U[N - steps - 1] if N - steps - 1 >= 0 else self.U[0]
            self.X[k + 1], _, _ = shoot(self.X[k], self.U[k], self.config,
                                        self.model, with_sensitivities=False)
        self._qp_active = self._shift_active_set(self._qp_active, steps)

    def _shift_active_set(self, active, steps):
        if not active:
            return active
        N = self.config.horizon
        nbox = NU * N
        out = []
        for row, side in active:
            if row < nbox:
                r = row - NU * steps
                if r >= 0:
                    out.append((r, side))
            else:
                k = (row - nbox) // 3 + 1
                axis = (row - nbox) % 3
                if k - steps >= 1:
                    out.append((nbox + (k - steps - 1) * 3 + axis, side))
        return tuple(out)

    # -- the real-time iteration ----------------------------------------------

    def step(self, x_init, window, elapsed=0.0):
        """One control cycle: shift the guess by any whole nodes the
        trajectory clock advanced, then run the configured SQP iterations.

        On QP failure the previous first input is returned with a
        non-convergence status (callers hold the last command).
        """
        if self.X is None:
            self.initialize(window)
        self._carry += elapsed
        if self._carry >= self.config.dt:
            steps = int(self._carry / self.config.dt + 1e-9)
            self._carry -= steps * self.config.dt
            self._shift(steps)

        sol = None
        for _ in range(self.config.sqp_iterations):
            sol = self._rti_iteration(x_init, window)
            if sol.status in ("infeasible", "fault"):
                break
        return sol

    def _rti_iteration(self, x_init, window):
        N = self.config.horizon
        cfg = self.config
        W = self.weights
        hold_u0 = self.U[0].copy()

        try:
            # linearize the shooting map around the guess
            A = np.empty((N, NX, NX))
            B = np.empty((N, NX, NU))
            d = np.empty((N, NX))
            for k in range(N):
                xk1, Sx, Su = shoot(self.X[k], self.U[k], cfg, self.model)
                A[k], B[k] = Sx, Su
                d[k] = xk1 - self.X[k + 1]
        except FloatingPointError:
            return NmpcSolution(hold_u0, self.X, self.U, "fault")

        nz = NU * N
        qd = W.state_diag()
        qu = np.array(W.input)

        # condense: dx_k = c_k + S_k z (z = stacked input corrections)
        S = np.zeros((N + 1, NX, nz))
        c = np.zeros((N + 1, NX))
        c[0] = x_init - self.X[0]
        for k in range(N):
            S[k + 1] = A[k] @ S[k]
            S[k + 1][:, NU * k:NU * (k + 1)] += B[k]
            c[k + 1] = A[k] @ c[k] + d[k]

        H = np.zeros((nz, nz))
        g = np.zeros(nz)
        obj0 = 0.0
        for k in range(N + 1):
            E = np.zeros((12, NX))
            E[0:3, 0:3] = np.eye(3)
            E[3:6, 3:6] = np.eye(3)
            E[6:9, 6:10] = quat_error_matrix(window.state(k)[6:10])
            E[9:12, 10:13] = np.eye(3)
            rho = np.concatenate([window.state(k)[0:3], window.state(k)[3:6],
                                  np.zeros(3), window.state(k)[10:13]])
            ebar = E @ (self.X[k] + c[k]) - rho
            ES = E @ S[k]
            WE = qd[:, None] * ES
            H += ES.T @ WE
            g += ES.T @ (qd * ebar)
            obj0 += ebar @ (qd * ebar)
        for k in range(N):
            sl = slice(NU * k, NU * (k + 1))
            du = self.U[k] - window.input(k)
            H[sl, sl] += np.diag(qu)
            g[sl] += qu * du
            obj0 += du @ (qu * du)
        H *= 2.0
        g *= 2.0

        lb = (np.full((N, NU), self.u_min) - self.U).reshape(-1)
        ub = (np.full((N, NU), self.u_max) - self.U).reshape(-1)

        # linearized body-rate rows for k = 1..N
        Ar = np.empty((3 * N, nz))
        lba = np.empty(3 * N)
        uba = np.empty(3 * N)
        bound = cfg.rate_bound
        for k in range(1, N + 1):
            rows = slice(3 * (k - 1), 3 * k)
            Ar[rows] = S[k][10:13]
            base = self.X[k][10:13] + c[k][10:13]
            lba[rows] = -bound - base
            uba[rows] = bound - base

        prob = QpProblem(H, g, lb, ub, Ar, lba, uba)
        qp_sol = self.solver.solve(prob, x0=np.zeros(nz),
                                   active_set=self._qp_active)
        if qp_sol.status == "infeasible":
            return NmpcSolution(hold_u0, self.X, self.U, "infeasible")
        self._qp_active = qp_sol.active_set

        z = qp_sol.x
        self.U = self.U + z.reshape(N, NU)
        np.clip(self.U, self.u_min, self.u_max, out=self.U)
        for k in range(N + 1):
            self.X[k] = self.X[k] + c[k] + S[k] @ z
            qn = self.X[k][6:10]
            self.X[k][6:10] = qn / np.linalg.norm(qn)

        status = "optimal" if qp_sol.status == "optimal" else qp_sol.status
        return NmpcSolution(self.U[0].copy(), self.X, self.U, status,
                            kkt_residual=qp_sol.kkt_residual,
                            qp_iterations=qp_sol.iterations,
                            qp_objective_start=obj0,
                            qp_objective=qp_sol.objective + obj0)


class ReferenceWindow:
    """Adapter giving the controller reference states/inputs per node."""

    def __init__(self, states, inputs):
        self._states = states
        self._inputs = inputs

    def state(self, k):
        return self._states[min(k, len(self._states) - 1)]

    def input(self, k):
        return self._inputs[min(k, len(self._inputs) - 1)]

    @classmethod
    def from_full_references(cls, refs):
        states = [np.concatenate([r.pos, r.vel, r.quat, r.rates]) for r in refs]
        inputs = [r.rotor_thrusts for r in refs[:-1]]
        return cls(np.array(states), np.array(inputs))
