import json

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from portqp.closed_form import min_variance_closed
from portqp.errors import BoundsError, DimensionError, NotPSDError, NotSymmetricError
from portqp.qp import (DEFAULT, HIGH, QPProblem, QPSettings, QPSolution, Status, check_kkt,
                       solve_qp)

from helpers import random_pd


def budget_qp(P, lower=None):
    n = P.shape[0]
    A = np.ones((1, n))
    l, u = [1.0], [1.0]
    if lower is not None:
        A = np.vstack([A, np.eye(n)])
        l = l + [lower] * n
        u = u + [np.inf] * n
    return QPProblem(P=P, q=np.zeros(n), A=A, l=l, u=u)


def test_simplex_identity():
    sol = solve_qp(budget_qp(np.eye(2), lower=0.0), HIGH)
    assert sol.status is Status.SOLVED
    np.testing.assert_allclose(sol.x, [0.5, 0.5], atol=1e-9)


def test_diag_budget_matches_hand_value():
    # S^-1 1 = (1, 1/4), C = 5/4, w = (0.8, 0.2)
    sol = solve_qp(budget_qp(np.diag([1.0, 4.0])), HIGH)
    assert sol.status is Status.SOLVED
    np.testing.assert_allclose(sol.x, [0.8, 0.2], atol=1e-10)


def test_default_preset_is_looser_but_close():
    sol = solve_qp(budget_qp(np.diag([1.0, 4.0])), DEFAULT)
    assert sol.status is Status.SOLVED
    np.testing.assert_allclose(sol.x, [0.8, 0.2], atol=1e-2)


def test_presets():
    assert HIGH.max_iter == 10_000
    assert HIGH.eps_abs == HIGH.eps_rel == 1e-8
    assert HIGH.polish


@pytest.mark.parametrize("kw", [dict(eps_abs=0.0), dict(eps_rel=-1.0), dict(max_iter=0),
                                dict(alpha=2.0)])
def test_settings_validation(kw):
    with pytest.raises(ValueError):
        QPSettings(**kw)


def test_l_greater_than_u_rejected():
    with pytest.raises(BoundsError):
        QPProblem(P=np.eye(1), q=[0.0], A=[[1.0]], l=[1.0], u=[0.0])


def test_dimension_mismatch_rejected():
    with pytest.raises(DimensionError):
        QPProblem(P=np.eye(2), q=[0.0, 0.0, 0.0], A=np.ones((1, 2)), l=[1.0], u=[1.0])
    with pytest.raises(DimensionError):
        QPProblem(P=np.eye(2), q=[0.0, 0.0], A=np.ones((1, 3)), l=[1.0], u=[1.0])
    with pytest.raises(DimensionError):
        QPProblem(P=np.eye(2), q=[0.0, 0.0], A=np.ones((1, 2)), l=[1.0, 0.0], u=[1.0])


def test_nonsymmetric_rejected():
    with pytest.raises(NotSymmetricError):
        QPProblem(P=[[1.0, 0.5], [0.0, 1.0]], q=[0, 0], A=np.ones((1, 2)), l=[1], u=[1])


def test_indefinite_rejected():
    with pytest.raises(NotPSDError):
        QPProblem(P=np.diag([1.0, -1.0]), q=[0, 0], A=np.ones((1, 2)), l=[1], u=[1])


def test_triplet_and_sparse_constraint_forms_agree():
    P = np.diag([1.0, 2.0, 3.0])
    dense = QPProblem(P=P, q=np.zeros(3), A=np.ones((1, 3)), l=[1], u=[1])
    trip = QPProblem(P=P, q=np.zeros(3), A=([0, 0, 0], [0, 1, 2], [1.0, 1.0, 1.0]), l=[1], u=[1])
    spm = QPProblem(P=P, q=np.zeros(3), A=sp.csr_matrix(np.ones((1, 3))), l=[1], u=[1])
    xs = [solve_qp(p, HIGH).x for p in (dense, trip, spm)]
    np.testing.assert_array_equal(xs[0], xs[1])
    np.testing.assert_array_equal(xs[0], xs[2])


def test_primal_infeasible_rows():
    prob = QPProblem(P=np.eye(1), q=[0.0], A=[[1.0], [1.0]], l=[1.0, -np.inf], u=[np.inf, 0.0])
    for settings in (DEFAULT, HIGH):
        sol = solve_qp(prob, settings)
        assert sol.status is Status.PRIMAL_INFEASIBLE


def test_dual_infeasible_unbounded_lp():
    prob = QPProblem(P=np.zeros((2, 2)), q=[-1.0, 0.0], A=[[0.0, 1.0]], l=[0.0], u=[1.0])
    sol = solve_qp(prob, HIGH)
    assert sol.status is Status.DUAL_INFEASIBLE


def test_kkt_of_exact_solution():
    prob = budget_qp(np.diag([1.0, 4.0]))
    x = np.array([0.8, 0.2])
    # stationarity: P x + A'y = 0 -> y = -0.8
    sol = QPSolution(x=x, y=np.array([-0.8]), status=Status.SOLVED, iterations=0, objective=0.0)
    r = check_kkt(prob, sol)
    assert r.primal < 1e-10 and r.dual < 1e-10 and r.gap < 1e-10


def test_kkt_zero_vector_primal_residual():
    prob = budget_qp(np.eye(3))
    sol = QPSolution(x=np.zeros(3), y=np.zeros(1), status=Status.SOLVED, iterations=0, objective=0.0)
    assert check_kkt(prob, sol).primal == pytest.approx(1.0, abs=1e-15)


def test_kkt_dual_residual_linear_in_perturbation():
    prob = budget_qp(np.diag([1.0, 4.0]))
    y = np.array([-0.8])
    res = []
    for eps in (1e-4, 2e-4, 4e-4):
        x = np.array([0.8 + eps, 0.2])
        sol = QPSolution(x=x, y=y, status=Status.SOLVED, iterations=0, objective=0.0)
        res.append(check_kkt(prob, sol).dual)
    np.testing.assert_allclose(res, [1e-4, 2e-4, 4e-4], rtol=1e-8)


def test_kkt_dimension_mismatch():
    prob = budget_qp(np.eye(2))
    sol = QPSolution(x=np.zeros(3), y=np.zeros(1), status=Status.SOLVED, iterations=0, objective=0.0)
    with pytest.raises(DimensionError):
        check_kkt(prob, sol)


def test_solved_status_meets_primal_tolerance(rng):
    P = random_pd(rng, 12)
    prob = budget_qp(P, lower=-0.1)
    for settings in (DEFAULT, HIGH):
        sol = solve_qp(prob, settings)
        assert sol.status is Status.SOLVED
        ax = prob.A @ sol.x
        scale = max(np.max(np.abs(ax)), np.max(np.abs(np.clip(ax, prob.l, prob.u))))
        assert check_kkt(prob, sol).primal <= settings.eps_abs + settings.eps_rel * scale


def test_deterministic(rng):
    prob = budget_qp(random_pd(rng, 20), lower=0.0)
    a, b = solve_qp(prob, HIGH), solve_qp(prob, HIGH)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
    assert a.iterations == b.iterations


def test_json_round_trip_with_infinite_bounds(rng):
    prob = budget_qp(random_pd(rng, 4), lower=0.0)
    text = prob.to_json()
    json.loads(text)
    back = QPProblem.from_json(text)
    np.testing.assert_array_equal(back.P, prob.P)
    np.testing.assert_array_equal(back.l, prob.l)
    np.testing.assert_array_equal(back.u, prob.u)
    np.testing.assert_array_equal(back.A.toarray(), prob.A.toarray())


def test_warm_start_reproduces_cold_solution(rng):
    P = random_pd(rng, 15)
    prob = budget_qp(P, lower=0.0)
    cold = solve_qp(prob, HIGH)
    warm = solve_qp(prob, HIGH, warm_start=(cold.x, cold.y))
    assert warm.status is Status.SOLVED
    np.testing.assert_allclose(warm.x, cold.x, atol=1e-9)
    # a malformed warm start is ignored rather than trusted
    bad = solve_qp(prob, HIGH, warm_start=(np.zeros(3), np.zeros(1)))
    np.testing.assert_allclose(bad.x, cold.x, atol=1e-9)


def test_problem_is_immutable(rng):
    prob = budget_qp(random_pd(rng, 3))
    with pytest.raises(ValueError):
        prob.P[0, 0] = 5.0


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 30))
def test_budget_only_matches_closed_form(seed, n):
    rng = np.random.default_rng(seed)
    P = random_pd(rng, n)
    sol = solve_qp(budget_qp(P), HIGH)
    assert sol.status is Status.SOLVED
    np.testing.assert_allclose(sol.x, min_variance_closed(P), atol=1e-6)


@given(seed=st.integers(0, 2**32 - 1), c=st.floats(1e-3, 1e3))
def test_argmin_invariant_to_objective_scaling(seed, c):
    rng = np.random.default_rng(seed)
    n = 8
    P = random_pd(rng, n)
    q = rng.normal(size=n) * 0.1
    A = np.vstack([np.ones((1, n)), np.eye(n)])
    l = np.r_[1.0, np.zeros(n)]
    u = np.r_[1.0, np.full(n, np.inf)]
    base = solve_qp(QPProblem(P=P, q=q, A=A, l=l, u=u), HIGH)
    scaled = solve_qp(QPProblem(P=c * P, q=c * q, A=A, l=l, u=u), HIGH)
    assert base.status is Status.SOLVED and scaled.status is Status.SOLVED
    np.testing.assert_allclose(scaled.x, base.x, atol=1e-8)


@given(seed=st.integers(0, 2**32 - 1))
def test_high_precision_primal_residual_not_worse(seed):
    rng = np.random.default_rng(seed)
    n = 10
    prob = budget_qp(random_pd(rng, n, cond=1e3), lower=-0.05)
    lo = solve_qp(prob, DEFAULT)
    hi = solve_qp(prob, HIGH)
    assert check_kkt(prob, hi).primal <= check_kkt(prob, lo).primal + 1e-15


@given(seed=st.integers(0, 2**32 - 1))
def test_infeasible_never_solved(seed):
    rng = np.random.default_rng(seed)
    n = 3
    P = random_pd(rng, n)
    A = np.zeros((2, n))
    A[:, 0] = 1.0
    prob = QPProblem(P=P, q=rng.normal(size=n), A=A, l=[1.0, -np.inf], u=[np.inf, 0.0])
    assert solve_qp(prob, HIGH).status is Status.PRIMAL_INFEASIBLE
