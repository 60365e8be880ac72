"""Active-set QP solver vs a brute-force KKT enumeration oracle."""

import itertools

import numpy as np
import pytest

from quadtrack.qp import ActiveSetQp, QpProblem

BIG = 1e19


def kkt_enumeration_oracle(problem):
    """Global minimum by enumerating every active-set combination.

    Each bound/general row can be inactive, at its lower, or at its upper
    bound. For every combination the equality-constrained KKT system is
    solved; candidates that are primal feasible with correctly signed
    multipliers are kept and the best objective wins. Only viable for tiny
    problems; independent of the solver under test.
    """
    H, g = problem.H, problem.g
    n = g.size
    if problem.A is not None:
        C = np.vstack([np.eye(n), problem.A])
        cl = np.concatenate([problem.lb, problem.lba])
        cu = np.concatenate([problem.ub, problem.uba])
    else:
        C, cl, cu = np.eye(n), problem.lb, problem.ub
    m = C.shape[0]

    best_x, best_f = None, np.inf
    for combo in itertools.product((0, -1, 1), repeat=m):
        rows = [i for i, s in enumerate(combo) if s != 0]
        if len(rows) > n:
            continue
        Cw = C[rows]
        if rows and np.linalg.matrix_rank(Cw) < len(rows):
            continue
        b = np.array([cl[i] if combo[i] < 0 else cu[i] for i in rows])
        if any(abs(v) >= BIG for v in b):
            continue
        kkt = np.block([[H, Cw.T], [Cw, np.zeros((len(rows), len(rows)))]]) \
            if rows else H
        rhs = np.concatenate([-g, b]) if rows else -g
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            continue
        x, lam = sol[:n], sol[n:]
        resid = C @ x
        if np.any(resid < cl - 1e-9) or np.any(resid > cu + 1e-9):
            continue
        # KKT assembled as Hx + Cw'lam = -g, so a lower-active row needs
        # lam <= 0 and an upper-active row lam >= 0
        signsvalid = all(l <= 1e-9 if combo[r] < 0 else l >= -1e-9
                         for r, l in zip(rows, lam))
        if not signsvalid:
            continue
        f = problem.objective(x)
        if f < best_f - 1e-12:
            best_f, best_x = f, x
    return best_x, best_f


def random_problem(rng, with_general=True):
    n = rng.integers(1, 5)
    F = rng.normal(size=(n, n))
    H = F @ F.T + 0.1 * np.eye(n)
    g = rng.normal(size=n)
    center = rng.normal(size=n)
    lb = center - rng.uniform(0.2, 2.0, size=n)
    ub = center + rng.uniform(0.2, 2.0, size=n)
    A = lba = uba = None
    if with_general:
        m = int(rng.integers(1, 5))
        A = rng.normal(size=(m, n))
        ax = A @ center
        lba = ax - rng.uniform(0.1, 2.0, size=m)
        uba = ax + rng.uniform(0.1, 2.0, size=m)
    return QpProblem(H, g, lb, ub, A, lba, uba)


def test_unconstrained_projection():
    # min |x - c|^2 has the obvious minimizer
    c = np.array([1.0, -2.0, 0.5])
    sol = ActiveSetQp().solve(QpProblem(2 * np.eye(3), -2 * c))
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.x, c, atol=1e-9)


def test_scalar_clamp():
    # min (x-3)^2 s.t. 0 <= x <= 2
    sol = ActiveSetQp().solve(QpProblem(np.array([[2.0]]), np.array([-6.0]),
                                        np.array([0.0]), np.array([2.0])))
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.x, [2.0], atol=1e-10)
    assert sol.active_set == ((0, 1),)


def test_matches_enumeration_oracle_box_only():
    rng = np.random.default_rng(7)
    solver = ActiveSetQp()
    for _ in range(300):
        prob = random_problem(rng, with_general=False)
        xo, fo = kkt_enumeration_oracle(prob)
        sol = solver.solve(prob)
        assert sol.status == "optimal"
        assert abs(sol.objective - fo) < 1e-7
        np.testing.assert_allclose(sol.x, xo, atol=1e-7)


def test_matches_enumeration_oracle_general_rows():
    rng = np.random.default_rng(11)
    solver = ActiveSetQp()
    for _ in range(700):
        prob = random_problem(rng, with_general=True)
        xo, fo = kkt_enumeration_oracle(prob)
        if xo is None:
            continue
        sol = solver.solve(prob)
        assert sol.status == "optimal"
        assert abs(sol.objective - fo) < 1e-7
        np.testing.assert_allclose(sol.x, xo, atol=1e-7)


def test_optimum_beats_random_feasible_points():
    rng = np.random.default_rng(3)
    prob = random_problem(rng, with_general=False)
    sol = ActiveSetQp().solve(prob)
    pts = rng.uniform(prob.lb, prob.ub, size=(1000, prob.g.size))
    objs = 0.5 * np.einsum("ij,jk,ik->i", pts, prob.H, pts) + pts @ prob.g
    assert sol.objective <= objs.min() + 1e-9


def test_objective_trace_monotone():
    rng = np.random.default_rng(5)
    for _ in range(100):
        prob = random_problem(rng, with_general=True)
        sol = ActiveSetQp().solve(prob)
        trace = np.array(sol.objective_trace)
        assert np.all(np.diff(trace) <= 1e-9)


def test_infeasible_detected():
    # x in [0, 1] but the general row wants x >= 5
    prob = QpProblem(np.array([[2.0]]), np.array([0.0]),
                     np.array([0.0]), np.array([1.0]),
                     A=np.array([[1.0]]), lba=np.array([5.0]), uba=np.array([9.0]))
    sol = ActiveSetQp().solve(prob)
    assert sol.status == "infeasible"


def test_warm_start_reduces_iterations():
    rng = np.random.default_rng(13)
    solver = ActiveSetQp()
    cold_total, warm_total = 0, 0
    for _ in range(60):
        prob = random_problem(rng, with_general=False)
        base = solver.solve(prob)
        # perturb the gradient slightly; warm start from the previous solve
        prob2 = QpProblem(prob.H, prob.g + 0.01 * rng.normal(size=prob.g.size),
                          prob.lb, prob.ub)
        warm = solver.solve(prob2, x0=base.x, active_set=base.active_set)
        cold = solver.solve(prob2)
        assert abs(warm.objective - cold.objective) < 1e-7
        cold_total += cold.iterations
        warm_total += warm.iterations
    assert warm_total < cold_total


def test_kkt_residual_small_when_optimal():
    rng = np.random.default_rng(17)
    for _ in range(50):
        prob = random_problem(rng, with_general=True)
        sol = ActiveSetQp().solve(prob)
        if sol.status == "optimal":
            assert sol.kkt_residual < 1e-8


def test_rejects_asymmetric_hessian():
    with pytest.raises(ValueError):
        QpProblem(np.array([[1.0, 0.5], [0.0, 1.0]]), np.zeros(2))
