import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import nnls

from bilevel_mpc.qp import (
    INFEASIBLE,
    OPTIMAL,
    UNBOUNDED,
    QpTolerances,
    QuadraticProgram,
    default_tolerances,
    kkt_residuals,
    solve_nnls,
    solve_qp,
)
from oracles import enumerate_qp, random_pd_qp


def test_single_bound():
    sol = solve_qp(QuadraticProgram(H=[[1.0]], c=[0.0], Aineq=[[-1.0]], bineq=[-1.0]))
    assert sol.status == OPTIMAL
    assert sol.z[0] == pytest.approx(1.0)
    assert sol.mu_ineq[0] == pytest.approx(1.0)
    assert sol.active_set == (0,)


def test_unconstrained():
    sol = solve_qp(QuadraticProgram(H=np.eye(2), c=[-1.0, -2.0]))
    np.testing.assert_allclose(sol.z, [1.0, 2.0])
    assert sol.value == pytest.approx(-2.5)


def test_equality_multiplier_sign():
    # min 1/2|z|^2  s.t. z1 + z2 = 2  ->  z = (1, 1), H z + c + Aeq' nu = 0 gives nu = -1
    sol = solve_qp(QuadraticProgram(H=np.eye(2), c=np.zeros(2), Aeq=[[1.0, 1.0]], beq=[2.0]))
    np.testing.assert_allclose(sol.z, [1.0, 1.0])
    assert sol.nu_eq[0] == pytest.approx(-1.0)


def test_infeasible_reports_measure():
    qp = QuadraticProgram(H=np.eye(1), c=[0.0], Aineq=[[1.0], [-1.0]], bineq=[-1.0, -1.0])
    sol = solve_qp(qp)
    assert sol.status == INFEASIBLE
    assert sol.infeasibility > 0.5


def test_unbounded_psd():
    qp = QuadraticProgram(H=np.diag([1.0, 0.0]), c=[0.0, -1.0], Aineq=[[0.0, -1.0]], bineq=[0.0])
    assert solve_qp(qp).status == UNBOUNDED


def test_psd_bounded_by_constraint():
    qp = QuadraticProgram(H=np.diag([1.0, 0.0]), c=[0.0, -1.0], Aineq=[[0.0, 1.0]], bineq=[3.0])
    sol = solve_qp(qp)
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.z, [0.0, 3.0], atol=1e-12)


def test_redundant_equalities_tolerated():
    qp = QuadraticProgram(H=np.eye(2), c=np.zeros(2), Aeq=[[1.0, 1.0], [2.0, 2.0]], beq=[2.0, 4.0])
    sol = solve_qp(qp)
    assert sol.ok
    np.testing.assert_allclose(sol.z, [1.0, 1.0])


def test_degenerate_vertex():
    # three constraints through the optimum, one redundant
    qp = QuadraticProgram(
        H=np.eye(2), c=[-2.0, -2.0],
        Aineq=[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], bineq=[1.0, 1.0, 2.0],
    )
    sol = solve_qp(qp)
    assert sol.ok
    np.testing.assert_allclose(sol.z, [1.0, 1.0], atol=1e-10)


def test_ill_conditioned_hessian_terminates():
    rng = np.random.default_rng(7)
    V, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    H = V @ np.diag([1.0, 1e-3, 1e-8, 1e-12]) @ V.T
    Ai = rng.standard_normal((12, 4))
    qp = QuadraticProgram(H=H, c=rng.standard_normal(4), Aineq=Ai, bineq=np.abs(rng.standard_normal(12)) + 0.1)
    sol = solve_qp(qp)
    assert sol.status == OPTIMAL
    scale = 1 + np.max(np.abs(qp.c))
    assert sol.kkt.stationarity <= 1e-8 * scale
    assert sol.kkt.complementarity <= 1e-8 * scale


def test_matches_enumeration_small_batch():
    rng = np.random.default_rng(11)
    for _ in range(60):
        q = int(rng.integers(1, 6))
        ne = int(rng.integers(0, min(2, q - 1) + 1)) if q > 1 else 0
        qp = random_pd_qp(rng, q, int(rng.integers(0, 7)), ne)
        ref, _ = enumerate_qp(qp)
        sol = solve_qp(qp)
        assert sol.status == OPTIMAL
        assert abs(sol.value - ref) <= 1e-7 * (1 + abs(ref))


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    q=st.integers(1, 6),
    ni=st.integers(0, 8),
    ne=st.integers(0, 2),
)
def test_kkt_invariants(seed, q, ni, ne):
    ne = min(ne, q - 1)
    qp = random_pd_qp(np.random.default_rng(seed), q, ni, ne)
    sol = solve_qp(qp)
    assert sol.status == OPTIMAL
    r = kkt_residuals(qp, sol.z, sol.mu_ineq, sol.nu_eq)
    scale = 1 + np.max(np.abs(qp.c)) + np.max(np.abs(qp.bineq), initial=0.0)
    assert r.stationarity <= 1e-8 * scale
    assert r.primal_ineq <= 1e-8 * scale
    assert r.primal_eq <= 1e-8 * scale
    assert r.complementarity <= 1e-8 * scale
    assert np.all(sol.mu_ineq >= 0)
    # multipliers are zero off the working set
    off = np.setdiff1d(np.arange(ni), sol.working_set)
    assert np.all(sol.mu_ineq[off] == 0)


def test_default_tolerances_context():
    qp = QuadraticProgram(H=np.eye(1), c=[0.0], Aineq=[[1.0], [-1.0]], bineq=[-0.5, -0.5])
    with default_tolerances(QpTolerances(feas=10.0)):
        assert solve_qp(qp).status != INFEASIBLE
    assert solve_qp(qp).status == INFEASIBLE


def test_dimension_validation():
    with pytest.raises(ValueError):
        QuadraticProgram(H=np.eye(2), c=np.zeros(3))
    with pytest.raises(ValueError):
        QuadraticProgram(H=np.eye(2), c=np.zeros(2), Aineq=np.ones((1, 3)), bineq=[0.0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), q=st.integers(1, 6), k=st.integers(0, 5))
def test_nnls_matches_scipy(seed, q, k):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((q, k))
    t = rng.standard_normal(q)
    mu, val = solve_nnls(G, t, np.eye(q))
    if k:
        ref, rnorm = nnls(-G, t)
        assert val == pytest.approx(0.5 * rnorm**2, rel=1e-8, abs=1e-10)
    else:
        assert val == pytest.approx(0.5 * t @ t)
    assert np.all(mu >= 0)


def test_nnls_weighted_metric_and_offset():
    # 1/2 |t + g mu|^2_{W^-1} + o mu with scalar data has a closed form
    t, g, w, o = np.array([-3.0]), np.array([[1.0]]), np.array([[2.0]]), np.array([0.5])
    mu, val = solve_nnls(g, t, w, o)
    # derivative: (t + g mu) / w + o = 0  ->  mu = 3 - 0.5 * 2 = 2
    assert mu[0] == pytest.approx(2.0)
    assert val == pytest.approx(0.5 * 1.0 / 2.0 + 1.0)
