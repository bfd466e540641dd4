import numpy as np
import pytest

from bilevel_mpc.blocking import (
    BlockingMatrix,
    construct_from_p0,
    image_contains,
    leading_free,
    one_block,
    orth,
    restriction_map,
    sample_initial_states,
)
from bilevel_mpc.errors import AssumptionViolation
from bilevel_mpc.formulations import TOY_X0, solve_p0_cascade, solve_p2


def test_leading_free_structure():
    M = leading_free(3, 5, 1).M
    expected = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 0, 1], [0, 0, 1]], dtype=float)
    np.testing.assert_array_equal(M, expected)
    assert leading_free(5, 5, 2).M.shape == (10, 10)
    np.testing.assert_array_equal(leading_free(1, 4, 1).M, one_block(4, 1).M)


def test_nesting_of_family():
    N = 6
    for i in range(1, N + 1):
        for j in range(1, N + 1):
            assert image_contains(leading_free(i, N, 2), leading_free(j, N, 2)) == (i <= j)


def test_restriction_map():
    M, Mh = leading_free(2, 5, 1).M, leading_free(4, 5, 1).M
    T = restriction_map(M, Mh)
    np.testing.assert_allclose(Mh @ T, M, atol=1e-12)
    with pytest.raises(AssumptionViolation):
        restriction_map(Mh, M)


def test_rank_deficient_rejected():
    with pytest.raises(AssumptionViolation):
        BlockingMatrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert BlockingMatrix(np.zeros((4, 0))).p == 0


def test_dict_round_trip():
    M = leading_free(3, 4, 2)
    back = BlockingMatrix.from_dict(M.to_dict())
    np.testing.assert_array_equal(back.M, M.M)
    with pytest.raises(ValueError):
        BlockingMatrix.from_dict({"rows": 2, "cols": 2, "data": [1.0]})


def test_orth_sign_convention_and_rank():
    X = np.array([[-1.0, -2.0], [0.0, 0.0], [-1.0, -2.0]])
    Q = orth(X)
    assert Q.shape == (3, 1)
    assert Q[0, 0] > 0
    np.testing.assert_allclose(Q.T @ Q, np.eye(1))


def test_sampling_is_seeded():
    a = sample_initial_states(TOY_X0, 0.2, 10, seed=3)
    b = sample_initial_states(TOY_X0, 0.2, 10, seed=3)
    np.testing.assert_array_equal(a, b)
    assert np.all(np.abs(a - TOY_X0) <= 0.2)


def test_algorithm1_dominance(toy):
    samples = sample_initial_states(TOY_X0, 0.2, 20, seed=1)
    M = construct_from_p0(toy, samples)
    assert 1 <= M.p <= 10
    for x in samples:
        assert solve_p2(toy, x, M).value <= solve_p0_cascade(toy, x).value + 1e-7


def test_algorithm1_needs_samples(toy):
    with pytest.raises(ValueError):
        construct_from_p0(toy, [])
