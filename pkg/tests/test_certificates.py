import json

import numpy as np
import pytest

from bilevel_mpc.blocking import leading_free
from bilevel_mpc.certificates import (
    blocked_gap_certificate,
    delta_bound,
    hmpc_gap_certificate,
    mfcq_probe,
    reduced_program,
)
from bilevel_mpc.errors import AssumptionViolation, InfeasibleProblem
from bilevel_mpc.formulations import TOY_X0, random_instance, solve_p0_cascade, solve_p2

EPS = (0.0, 0.1, 0.5, 1.0)


def test_mfcq_probe_cases():
    assert mfcq_probe(np.zeros((0, 3)))
    assert mfcq_probe(np.eye(2))
    assert not mfcq_probe(np.array([[1.0, 2.0], [-1.0, -2.0]]))
    assert not mfcq_probe(np.array([[0.0, 0.0]]))
    # box vertex: both upper bounds active
    assert mfcq_probe(np.array([[1.0, 0.0], [0.0, 1.0]]))


def test_toy_blocked_gaps_covered(toy):
    V2 = solve_p2(toy, TOY_X0).value
    for i in range(1, 11):
        M = leading_free(i, 10, 1)
        gap = solve_p2(toy, TOY_X0, M).value - V2
        certs = [blocked_gap_certificate(toy, M, None, TOY_X0, e) for e in EPS]
        assert all(c.issued for c in certs)
        for c in certs:
            assert -1e-9 <= gap <= c.delta + 1e-9
        deltas = [c.delta for c in certs]
        assert all(b <= a + 1e-12 for a, b in zip(deltas, deltas[1:]))


def test_full_blocking_certifies_zero_gap(toy):
    cert = blocked_gap_certificate(toy, None, None, TOY_X0)
    assert cert.issued
    assert cert.delta == pytest.approx(0.0, abs=1e-12)


def test_epsilon_tightens_small_blocking(toy):
    M = leading_free(2, 10, 1)
    d0 = blocked_gap_certificate(toy, M, None, TOY_X0, 0.0).delta
    d5 = blocked_gap_certificate(toy, M, None, TOY_X0, 0.5).delta
    gap = solve_p2(toy, TOY_X0, M).value - solve_p2(toy, TOY_X0).value
    assert d5 < 0.5 * d0
    assert gap <= d5 + 1e-9


def test_hmpc_certificate_covers_gap(toy):
    gap = solve_p0_cascade(toy, TOY_X0).value - solve_p2(toy, TOY_X0).value
    for e in EPS:
        c = hmpc_gap_certificate(toy, TOY_X0, e)
        assert c.issued
        assert c.certified_pair == ("P0", "P2")
        assert 0 <= gap <= c.delta + 1e-9


def test_hmpc_refused_with_violating_rows(toy):
    x0 = np.array([-0.05, 0.5])
    c = hmpc_gap_certificate(toy, x0)
    assert not c.issued
    assert c.violations
    U0 = solve_p0_cascade(toy, x0).U
    g = toy.upper.evaluate(U0, x0)
    assert {v["row"] for v in c.violations} == set(np.flatnonzero(g > 1e-8).tolist())
    d = c.to_dict()
    assert d["delta"] is None
    json.dumps(d)


def test_non_nested_blockings_rejected(toy):
    with pytest.raises(AssumptionViolation):
        blocked_gap_certificate(toy, leading_free(4, 10, 1), leading_free(2, 10, 1), TOY_X0)


def test_delta_bound_rejects_infeasible_point(toy):
    prog = reduced_program(toy, None, TOY_X0)
    with pytest.raises(ValueError):
        delta_bound(prog, np.full(10, 50.0))


def test_delta_zero_at_optimum(toy):
    prog = reduced_program(toy, None, TOY_X0)
    rep = solve_p2(toy, TOY_X0)
    cert = delta_bound(prog, rep.Phi)
    assert cert.delta <= 1e-12
    assert cert.mfcq_witness


def test_certificate_json_fields(toy):
    d = blocked_gap_certificate(toy, leading_free(3, 10, 1), None, TOY_X0, 0.5).to_dict()
    for key in ("certified_pair", "delta", "epsilon", "index_set", "mu", "mfcq", "issued"):
        assert key in d
    assert json.loads(json.dumps(d)) == d


def test_random_soundness_sample():
    rng = np.random.default_rng(42)
    done = 0
    while done < 40:
        n = int(rng.integers(1, 5))
        m = int(rng.integers(1, min(n, 2) + 1))
        N = int(rng.integers(1, 7))
        inst = random_instance(rng, n, m, N)
        x0 = rng.normal(scale=0.7, size=n)
        i = int(rng.integers(1, N + 1))
        j = int(rng.integers(i, N + 1))
        M, Mh = leading_free(i, N, m), leading_free(j, N, m)
        try:
            gap = solve_p2(inst, x0, M).value - solve_p2(inst, x0, Mh).value
        except InfeasibleProblem:
            continue
        for e in EPS:
            c = blocked_gap_certificate(inst, M, Mh, x0, e)
            if c.issued:
                assert -1e-9 <= gap <= c.delta + 1e-9 * (1 + abs(gap))
        done += 1
