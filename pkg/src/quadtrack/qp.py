"""Dense convex QP solver: primal active-set method with box and general
linear constraints.

    minimize    0.5 x'Hx + g'x
    subject to  lb  <= x  <= ub
                lba <= Ax <= uba

Built for the small problems this package generates (control allocation:
4 vars; condensed receding-horizon subproblem: ~80 vars plus rate rows).
Equality-constrained subproblems use a null-space method with Cholesky
factorization of the reduced Hessian; a Levenberg shift of 1e-9 is added if
the factorization fails. Constraint-selection ties break toward the lowest
row index so runs are deterministic across platforms. A start point that
violates the general rows triggers a slack phase-1 solved with the same
machinery.
"""

from dataclasses import dataclass, field

import numpy as np

BIG = 1e20


@dataclass
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    lb: np.ndarray = None
    ub: np.ndarray = None
    A: np.ndarray = None
    lba: np.ndarray = None
    uba: np.ndarray = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.g = np.asarray(self.g, dtype=float)
        n = self.g.size
        self.lb = np.full(n, -BIG) if self.lb is None else np.asarray(self.lb, dtype=float)
        self.ub = np.full(n, BIG) if self.ub is None else np.asarray(self.ub, dtype=float)
        if self.A is not None:
            self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
            m = self.A.shape[0]
            self.lba = np.full(m, -BIG) if self.lba is None else np.asarray(self.lba, dtype=float)
            self.uba = np.full(m, BIG) if self.uba is None else np.asarray(self.uba, dtype=float)
        if np.max(np.abs(self.H - self.H.T)) > 1e-10:
            raise ValueError("Hessian must be symmetric")
        if np.any(self.lb > self.ub):
            raise ValueError("lb > ub")
        if self.A is not None and np.any(self.lba > self.uba):
            raise ValueError("lba > uba")

    def objective(self, x):
        return float(0.5 * x @ self.H @ x + self.g @ x)


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    status: str                      # "optimal" | "max-iterations" | "infeasible"
    active_set: tuple = ()           # ((row, side), ...); side -1 lower / +1 upper
    iterations: int = 0
    kkt_residual: float = np.nan
    objective_trace: list = field(default_factory=list)


class ActiveSetQp:
    """Reusable solver; instances are independent (scratch state only)."""

    def __init__(self, tol=1e-8, max_iter=200, regularization=1e-9):
        self.tol = tol
        self.max_iter = max_iter
        self.reg = regularization

    # -- public API ---------------------------------------------------------

    def solve(self, problem, x0=None, active_set=None):
        n = problem.g.size
        if problem.A is not None:
            C = np.vstack([np.eye(n), problem.A])
            cl = np.concatenate([problem.lb, problem.lba])
            cu = np.concatenate([problem.ub, problem.uba])
        else:
            C, cl, cu = np.eye(n), problem.lb, problem.ub

        x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
        x = np.clip(x, problem.lb, problem.ub)

        viol = np.maximum(cl - C @ x, C @ x - cu)
        phase1_iters = 0
        if np.max(viol) > self.tol:
            x, feasible, phase1_iters = self._phase1(problem, C, cl, cu, x)
            if not feasible:
                return QpSolution(x, problem.objective(x), "infeasible",
                                  iterations=phase1_iters)

        warm = self._filter_working_set(active_set, C, cl, cu, x)
        sol = self._iterate(problem.H, problem.g, C, cl, cu, x, warm)
        sol.x = np.clip(sol.x, problem.lb, problem.ub)
        sol.objective = problem.objective(sol.x)
        sol.iterations += phase1_iters
        return sol

    # -- internals ----------------------------------------------------------

    def _phase1(self, problem, C, cl, cu, x):
        """Minimize squared slack on the general rows from a bound-feasible x."""
        n = problem.g.size
        m = C.shape[0] - n
        ax = C[n:] @ x
        s = np.clip(ax, cl[n:], cu[n:]) - ax
        h1 = np.diag(np.concatenate([np.full(n, 1e-12), np.ones(m)]))
        g1 = np.zeros(n + m)
        C1 = np.vstack([np.eye(n + m),
                        np.hstack([C[n:], np.eye(m)])])
        cl1 = np.concatenate([problem.lb, np.full(m, -BIG), cl[n:]])
        cu1 = np.concatenate([problem.ub, np.full(m, BIG), cu[n:]])
        sol = self._iterate(h1, g1, C1, cl1, cu1, np.concatenate([x, s]), [])
        xs = sol.x
        feasible = np.max(np.abs(xs[n:])) <= 1e-6
        return xs[:n], feasible, sol.iterations

    def _filter_working_set(self, active_set, C, cl, cu, x):
        if not active_set:
            return []
        out = []
        m = C.shape[0]
        for row, side in active_set:
            if not 0 <= row < m:
                continue
            bound = cl[row] if side < 0 else cu[row]
            if abs(bound) >= BIG:
                continue
            if abs(C[row] @ x - bound) <= 1e-7:
                out.append((int(row), int(side)))
        return out

    def _iterate(self, H, g, C, cl, cu, x, working):
        n = x.size
        equalities = [(int(r), -1) for r in np.flatnonzero(cu - cl <= 1e-12)]
        eq_rows = {r for r, _ in equalities}
        wset = list(equalities)
        for entry in working:
            if entry[0] not in eq_rows and entry[0] not in [r for r, _ in wset]:
                wset.append(entry)
        wset = self._drop_dependent(C, wset)

        trace = [float(0.5 * x @ H @ x + g @ x)]
        status = "max-iterations"
        kkt = np.nan
        it = 0
        while it < self.max_iter:
            it += 1
            rows = [r for r, _ in wset]
            Cw = C[rows] if rows else np.zeros((0, n))
            p, lam = self._eqp_step(H, g, x, Cw)

            if np.max(np.abs(p), initial=0.0) <= self.tol:
                # stationary on the working set; check multiplier signs:
                # lower-active needs lam >= 0, upper-active lam <= 0
                worst, worst_viol = None, self.tol
                for j, (r, side) in enumerate(wset):
                    if r in eq_rows:
                        continue
                    v = lam[j] if side < 0 else -lam[j]
                    if -v > worst_viol:
                        worst_viol, worst = -v, j
                if worst is None:
                    status = "optimal"
                    grad = H @ x + g
                    kkt = float(np.linalg.norm(grad - Cw.T @ lam))
                    break
                del wset[worst]
                continue

            cp = C @ p
            cx = C @ x
            wrows = {r for r, _ in wset}
            alpha, block = 1.0, None
            for r in range(C.shape[0]):
                if r in wrows:
                    continue
                if cp[r] > self.tol:
                    room = (cu[r] - cx[r]) / cp[r]
                    if room < alpha - 1e-12:
                        alpha, block = max(room, 0.0), (r, 1)
                elif cp[r] < -self.tol:
                    room = (cl[r] - cx[r]) / cp[r]
                    if room < alpha - 1e-12:
                        alpha, block = max(room, 0.0), (r, -1)
            x = x + alpha * p
            if block is not None:
                wset.append(block)
            trace.append(float(0.5 * x @ H @ x + g @ x))

        return QpSolution(x, trace[-1], status,
                          active_set=tuple((r, s) for r, s in wset if r not in eq_rows),
                          iterations=it, kkt_residual=kkt, objective_trace=trace)

    def _eqp_step(self, H, g, x, Cw):
        """Step p and multipliers of min_p 0.5|x+p|_H^2 + g'(x+p) s.t. Cw p = 0."""
        n = x.size
        grad = H @ x + g
        mw = Cw.shape[0]
        if mw == 0:
            return -self._chol_solve(H, grad), np.zeros(0)
        q, r = np.linalg.qr(Cw.T, mode="complete")
        Z = q[:, mw:]
        if Z.shape[1] == 0:
            p = np.zeros(n)
        else:
            Hz = Z.T @ H @ Z
            p = Z @ (-self._chol_solve(Hz, Z.T @ grad))
        # first-order condition Cw' lam = grad + Hp, via the QR factors
        lam = np.linalg.solve(r[:mw, :mw], q[:, :mw].T @ (grad + H @ p))
        return p, lam

    def _chol_solve(self, M, b):
        try:
            L = np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            L = np.linalg.cholesky(M + self.reg * np.eye(M.shape[0]))
        return np.linalg.solve(L.T, np.linalg.solve(L, b))

    def _drop_dependent(self, C, wset):
        kept, rows = [], []
        for entry in wset:
            cand = rows + [entry[0]]
            if np.linalg.matrix_rank(C[cand]) == len(cand):
                kept.append(entry)
                rows.append(entry[0])
        return kept
