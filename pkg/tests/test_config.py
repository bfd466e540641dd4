import json
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilevel_mpc.config import ProblemConfig, load_config, loads_config, save_config, toy_config
from bilevel_mpc.errors import ConfigError
from bilevel_mpc.formulations import TOY_X0, solve_p3, toy_instance


def _toy_dict():
    return json.loads(toy_config().dumps())


def test_bundled_toy_matches_builder():
    cfg = toy_config()
    inst = cfg.build()
    ref = toy_instance()
    np.testing.assert_allclose(inst.model.Hlow, ref.model.Hlow, atol=1e-14)
    np.testing.assert_allclose(inst.upper.G, ref.upper.G)
    np.testing.assert_allclose(cfg.x0, TOY_X0)
    assert solve_p3(inst, cfg.x0).value == pytest.approx(solve_p3(ref, TOY_X0).value, rel=1e-12)


def test_round_trip_idempotent(tmp_path):
    cfg = toy_config()
    p1 = tmp_path / "a.json"
    save_config(cfg, p1)
    text1 = p1.read_text()
    p2 = tmp_path / "b.json"
    save_config(load_config(p1), p2)
    assert p2.read_text() == text1


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, min_value=-1e6, max_value=1e6), min_size=4, max_size=4))
def test_float_round_trip_bit_exact(vals):
    d = _toy_dict()
    d["A"] = {"rows": 2, "cols": 2, "data": [1.0, vals[0] * 1e-6, 0.0, 1.0]}
    d["x0"] = [vals[1] * 1e-6 - 1.0, vals[2] * 1e-6]
    d["weights"]["Q"] = {"rows": 2, "cols": 2, "data": [1.0 + abs(vals[3]) * 1e-6, 0.0, 0.0, 1.0]}
    try:
        cfg = ProblemConfig.from_dict(d)
    except ConfigError:
        return  # a draw may break an assumption; only round-trips are under test
    back = loads_config(cfg.dumps())
    assert back.A.tobytes() == cfg.A.tobytes()
    assert back.x0.tobytes() == cfg.x0.tobytes()
    assert back.dumps() == cfg.dumps()


def test_nested_and_rowmajor_forms_agree():
    d = _toy_dict()
    d["A"] = [[1.0, 0.3], [0.0, 1.0]]
    a = ProblemConfig.from_dict(d)
    d["A"] = {"rows": 2, "cols": 2, "data": [1.0, 0.3, 0.0, 1.0]}
    b = ProblemConfig.from_dict(d)
    np.testing.assert_array_equal(a.A, b.A)


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda d: d.__setitem__("A", [[1.0, 0.3], [0.0]]), "A: row 1 has 1 entries, expected 2"),
        (lambda d: d.__setitem__("A", [[1.0, 0.3], [0.0, "x"]]), "A: entry at row 1, column 1"),
        (lambda d: d.__setitem__("A", {"rows": 2, "cols": 2, "data": [1, 2, 3]}), "A: data has 3 entries"),
        (lambda d: d.__setitem__("B", [[0.045]]), "B: has 1 rows, expected 2"),
        (lambda d: d.__setitem__("N", 0), "N: expected a positive integer"),
        (lambda d: d["weights"].__setitem__("R", [[0.1, 0.0]]), "weights.R: has 2 columns, expected 1"),
        (lambda d: d["upper_constraints"][0].__setitem__("Cx", {"rows": 1, "cols": 3, "data": [1, 0, 0]}),
         "upper_constraints[0].Cx: has 3 columns, expected 2"),
        (lambda d: d["lower_constraints"][0].__setitem__("stages", [0, 99]), "stage(s) [99] outside"),
        (lambda d: d.__setitem__("x0", [1.0]), "x0: has 1 entries, expected 2"),
        (lambda d: d["tolerances"].__setitem__("bogus", 1.0), "tolerances.bogus: unknown"),
        (lambda d: d.__delitem__("A"), "missing required field 'A'"),
        (lambda d: d["weights"].__setitem__("R", [[-1.0]]), "not positive definite"),
        (lambda d: d.__setitem__("B", [[0.0], [0.0]]), "rank deficient"),
    ],
)
def test_diagnostics(mutate, message):
    d = _toy_dict()
    mutate(d)
    with pytest.raises(ConfigError, match=re.escape(message)):
        ProblemConfig.from_dict(d)


def test_invalid_json_location():
    with pytest.raises(ConfigError, match="line 1"):
        loads_config("{not json")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")


def test_stacked_weights_config():
    d = _toy_dict()
    N = d["N"]
    d["weights"] = {"Qbar": np.eye(2 * N).tolist(), "Rbar": (0.1 * np.eye(N)).tolist()}
    with pytest.raises(ConfigError, match="upper_weights"):
        ProblemConfig.from_dict(d)
    d["upper_weights"] = {"Q": [[1.0, 0.0], [0.0, 1.0]], "R": [[0.1]]}
    cfg = ProblemConfig.from_dict(d)
    assert solve_p3(cfg.build(), cfg.x0).value == pytest.approx(solve_p3(toy_instance(), TOY_X0).value, rel=1e-12)
    assert loads_config(cfg.dumps()).dumps() == cfg.dumps()


def test_horizon_override():
    cfg = toy_config().with_horizon(3)
    assert cfg.build().model.N == 3
