"""JSON problem configuration: loading with precise diagnostics, canonical serialization."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .errors import BmpcError, ConfigError
from .formulations import AffineStageConstraint, BilevelInstance, DEFAULT_ORACLE_CAP, build_instance

DEFAULT_TOLERANCES = {
    "rank": None,
    "gamma": None,
    "algorithm1": 1e-8,
    "settling": 1e-3,
    "oracle_cap": DEFAULT_ORACLE_CAP,
    "samples": 50,
    "sample_half_width": 0.2,
}


def matrix_to_json(M) -> dict:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return {"rows": int(M.shape[0]), "cols": int(M.shape[1]), "data": [float(v) for v in M.reshape(-1)]}


def _finite(values, where):
    for i, v in enumerate(values):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{where}: entry {i} is {v!r}, expected a number")
        if not math.isfinite(v):
            raise ConfigError(f"{where}: entry {i} is not finite")


def parse_matrix(obj, where: str, shape: tuple | None = None) -> np.ndarray:
    """Matrix from ``{"rows","cols","data"}`` (row-major) or nested lists."""
    if isinstance(obj, dict):
        missing = [k for k in ("rows", "cols", "data") if k not in obj]
        if missing:
            raise ConfigError(f"{where}: missing field(s) {missing}")
        rows, cols, data = obj["rows"], obj["cols"], obj["data"]
        if not isinstance(rows, int) or not isinstance(cols, int) or rows < 0 or cols < 0:
            raise ConfigError(f"{where}: rows/cols must be nonnegative integers")
        if not isinstance(data, list) or len(data) != rows * cols:
            got = len(data) if isinstance(data, list) else type(data).__name__
            raise ConfigError(f"{where}: data has {got} entries, expected rows*cols = {rows * cols}")
        for k, v in enumerate(data):
            try:
                _finite([v], where)
            except ConfigError:
                raise ConfigError(f"{where}: entry at row {k // max(cols, 1)}, column {k % max(cols, 1)} is {v!r}, "
                                  "expected a finite number") from None
        M = np.asarray(data, dtype=float).reshape(rows, cols)
    elif isinstance(obj, list):
        if not obj or not isinstance(obj[0], list):
            raise ConfigError(f"{where}: nested-list matrix must be a nonempty list of rows")
        width = len(obj[0])
        for r, row in enumerate(obj):
            if not isinstance(row, list):
                raise ConfigError(f"{where}: row {r} is not a list")
            if len(row) != width:
                raise ConfigError(f"{where}: row {r} has {len(row)} entries, expected {width}")
            for c, v in enumerate(row):
                if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                    raise ConfigError(f"{where}: entry at row {r}, column {c} is {v!r}, expected a finite number")
        M = np.asarray(obj, dtype=float)
    else:
        raise ConfigError(f"{where}: expected a matrix object or nested list, got {type(obj).__name__}")
    if shape is not None:
        for axis, (want, got) in enumerate(zip(shape, M.shape)):
            if want is not None and want != got:
                label = "rows" if axis == 0 else "columns"
                raise ConfigError(f"{where}: has {got} {label}, expected {want}")
    return M


def parse_vector(obj, where: str, length: int | None = None) -> np.ndarray:
    if not isinstance(obj, list):
        raise ConfigError(f"{where}: expected a list of numbers")
    _finite(obj, where)
    v = np.asarray(obj, dtype=float)
    if length is not None and v.shape[0] != length:
        raise ConfigError(f"{where}: has {v.shape[0]} entries, expected {length}")
    return v


@dataclass
class ProblemConfig:
    A: np.ndarray
    B: np.ndarray
    N: int
    Q: np.ndarray | None = None
    P: np.ndarray | None = None
    R: np.ndarray | None = None
    Qbar: np.ndarray | None = None
    Rbar: np.ndarray | None = None
    upper_weights: tuple | None = None
    lower: list = field(default_factory=list)
    upper: list = field(default_factory=list)
    x_target: np.ndarray | None = None
    u_target: np.ndarray | None = None
    x0: np.ndarray | None = None
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    name: str = ""

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def with_horizon(self, N: int) -> "ProblemConfig":
        if self.Qbar is not None:
            raise ConfigError("cannot change the horizon of a config given by stacked weights")
        return replace(self, N=int(N))

    def build(self) -> BilevelInstance:
        try:
            return build_instance(
                self.A, self.B, self.N, self.Q, self.P, self.R,
                lower=self.lower, upper=self.upper,
                x_target=self.x_target, u_target=self.u_target,
                upper_weights=self.upper_weights, Qbar=self.Qbar, Rbar=self.Rbar,
                rank_tol=self.tolerances.get("rank"), gamma_tol=self.tolerances.get("gamma"),
            )
        except (ValueError, BmpcError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"config {self.name or '<unnamed>'} is invalid: {exc}") from exc

    @classmethod
    def from_dict(cls, d: dict, name: str = "") -> "ProblemConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be a JSON object")
        for key in ("A", "B", "N"):
            if key not in d:
                raise ConfigError(f"missing required field {key!r}")
        A = parse_matrix(d["A"], "A")
        if A.shape[0] != A.shape[1]:
            raise ConfigError(f"A: has {A.shape[1]} columns, expected {A.shape[0]} (square)")
        n = A.shape[0]
        B = parse_matrix(d["B"], "B", (n, None))
        m = B.shape[1]
        N = d["N"]
        if isinstance(N, bool) or not isinstance(N, int) or N < 1:
            raise ConfigError(f"N: expected a positive integer, got {N!r}")
        w = d.get("weights")
        if not isinstance(w, dict):
            raise ConfigError("weights: expected an object with Q, P, R or Qbar, Rbar")
        Q = P = R = Qbar = Rbar = None
        if "Qbar" in w or "Rbar" in w:
            Qbar = parse_matrix(w.get("Qbar"), "weights.Qbar", (N * n, N * n))
            Rbar = parse_matrix(w.get("Rbar"), "weights.Rbar", (N * m, N * m))
        else:
            Q = parse_matrix(w.get("Q"), "weights.Q", (n, n))
            P = parse_matrix(w.get("P", w.get("Q")), "weights.P", (n, n))
            R = parse_matrix(w.get("R"), "weights.R", (m, m))
        uw = d.get("upper_weights")
        upper_weights = None
        if uw is not None:
            if not isinstance(uw, dict):
                raise ConfigError("upper_weights: expected an object with Q, R and optional P")
            Qu = parse_matrix(uw.get("Q"), "upper_weights.Q", (n, n))
            Ru = parse_matrix(uw.get("R"), "upper_weights.R", (m, m))
            Pu = parse_matrix(uw.get("P", uw.get("Q")), "upper_weights.P", (n, n))
            upper_weights = (Qu, Ru, Pu)
        elif Q is None:
            raise ConfigError("upper_weights: required when lower weights are given as Qbar/Rbar")
        lower = [_parse_constraint(c, f"lower_constraints[{i}]", n, m, N) for i, c in enumerate(d.get("lower_constraints", []))]
        upper = [_parse_constraint(c, f"upper_constraints[{i}]", n, m, N) for i, c in enumerate(d.get("upper_constraints", []))]
        x_target = parse_vector(d["x_target"], "x_target", n) if "x_target" in d else None
        u_target = parse_vector(d["u_target"], "u_target", m) if "u_target" in d else None
        x0 = parse_vector(d["x0"], "x0", n) if d.get("x0") is not None else None
        tol = dict(DEFAULT_TOLERANCES)
        given = d.get("tolerances", {})
        if not isinstance(given, dict):
            raise ConfigError("tolerances: expected an object")
        for k, v in given.items():
            if k not in DEFAULT_TOLERANCES:
                raise ConfigError(f"tolerances.{k}: unknown tolerance (known: {sorted(DEFAULT_TOLERANCES)})")
            if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0):
                raise ConfigError(f"tolerances.{k}: expected a positive number or null, got {v!r}")
            tol[k] = v
        cfg = cls(A=A, B=B, N=N, Q=Q, P=P, R=R, Qbar=Qbar, Rbar=Rbar, upper_weights=upper_weights,
                  lower=lower, upper=upper, x_target=x_target, u_target=u_target, x0=x0,
                  tolerances=tol, name=str(d.get("name", name)))
        cfg.build()  # surfaces rank, definiteness and Gamma failures at load time
        return cfg

    def to_dict(self) -> dict:
        out = {"name": self.name, "A": matrix_to_json(self.A), "B": matrix_to_json(self.B), "N": self.N}
        if self.Qbar is not None:
            out["weights"] = {"Qbar": matrix_to_json(self.Qbar), "Rbar": matrix_to_json(self.Rbar)}
        else:
            out["weights"] = {"Q": matrix_to_json(self.Q), "P": matrix_to_json(self.P), "R": matrix_to_json(self.R)}
        if self.upper_weights is not None:
            Qu, Ru, Pu = self.upper_weights
            out["upper_weights"] = {"Q": matrix_to_json(Qu), "R": matrix_to_json(Ru), "P": matrix_to_json(Pu)}
        out["lower_constraints"] = [_constraint_to_json(c) for c in self.lower]
        out["upper_constraints"] = [_constraint_to_json(c) for c in self.upper]
        if self.x_target is not None:
            out["x_target"] = [float(v) for v in self.x_target]
        if self.u_target is not None:
            out["u_target"] = [float(v) for v in self.u_target]
        out["x0"] = None if self.x0 is None else [float(v) for v in self.x0]
        out["tolerances"] = dict(self.tolerances)
        return out

    def dumps(self) -> str:
        # json writes floats with repr, which round-trips every double exactly
        return json.dumps(self.to_dict(), indent=2)


def _parse_constraint(obj, where, n, m, N) -> AffineStageConstraint:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    kind = obj.get("type", "affine")
    stages = obj.get("stages")
    if stages is not None:
        if not isinstance(stages, list) or any(isinstance(k, bool) or not isinstance(k, int) for k in stages):
            raise ConfigError(f"{where}.stages: expected a list of integers or null")
        bad = [k for k in stages if not 0 <= k < N]
        if bad:
            raise ConfigError(f"{where}.stages: stage(s) {bad} outside 0..{N - 1}")
    if kind == "input_box":
        lo = parse_vector(obj.get("lower"), f"{where}.lower", m)
        hi = parse_vector(obj.get("upper"), f"{where}.upper", m)
        bad = np.flatnonzero(lo > hi)
        if bad.size:
            raise ConfigError(f"{where}: lower > upper at input component(s) {bad.tolist()}")
        return AffineStageConstraint.input_box(lo, hi, n, stages)
    if kind != "affine":
        raise ConfigError(f"{where}.type: unknown constraint type {kind!r} (expected 'affine' or 'input_box')")
    d = parse_vector(obj.get("d"), f"{where}.d")
    Cx = parse_matrix(obj.get("Cx"), f"{where}.Cx", (d.size, n))
    Cu = parse_matrix(obj.get("Cu"), f"{where}.Cu", (d.size, m))
    return AffineStageConstraint(Cx, Cu, d, stages)


def _constraint_to_json(c: AffineStageConstraint) -> dict:
    return {
        "type": "affine",
        "Cx": matrix_to_json(c.Cx),
        "Cu": matrix_to_json(c.Cu),
        "d": [float(v) for v in c.d],
        "stages": None if c.stages is None else list(c.stages),
    }


def loads_config(text: str, name: str = "") -> ProblemConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return ProblemConfig.from_dict(d, name)


def load_config(path) -> ProblemConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads_config(text, str(path))


def save_config(cfg: ProblemConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(cfg.dumps())


def toy_config() -> ProblemConfig:
    """Bundled double-integrator example."""
    text = resources.files("bilevel_mpc").joinpath("data/toy.json").read_text()
    return loads_config(text, "toy")
