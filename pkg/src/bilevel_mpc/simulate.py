"""Receding-horizon closed-loop simulation of the cascades and the centralized controller."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import BmpcError, InfeasibleProblem
from .formulations import (
    BilevelInstance,
    DEFAULT_ORACLE_CAP,
    solve_lower,
    solve_p0_cascade,
    solve_p1_oracle,
    solve_p2,
    solve_p3,
)

HMPC = "hmpc_cascade"
REDUCED = "reduced_bilevel_cascade"
ORACLE = "oracle_bilevel_cascade"
CENTRALIZED = "centralized"
KINDS = (HMPC, REDUCED, ORACLE, CENTRALIZED)
_BLOCKED = (REDUCED, ORACLE)


@dataclass(frozen=True, eq=False)
class ControllerSpec:
    kind: str
    inst: BilevelInstance
    blocking: object = None
    oracle_cap: int = DEFAULT_ORACLE_CAP

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown controller kind {self.kind!r}; expected one of {KINDS}")
        if self.blocking is not None and self.kind not in _BLOCKED:
            raise ValueError(f"controller {self.kind!r} does not take a blocking matrix")

    def solve(self, x):
        """Input stack and value of this controller's problem(s) at state x."""
        inst = self.inst
        if self.kind == HMPC:
            rep = solve_p0_cascade(inst, x)
        elif self.kind == CENTRALIZED:
            rep = solve_p3(inst, x)
        else:
            if self.kind == REDUCED:
                upper = solve_p2(inst, x, self.blocking)
            else:
                upper = solve_p1_oracle(inst, x, self.blocking, cap=self.oracle_cap)
            # the lower layer closes the cascade: it receives only the reference
            rep = solve_lower(inst, upper.Theta, x)
        return rep


@dataclass
class ClosedLoopTrace:
    kind: str
    states: np.ndarray
    inputs: np.ndarray
    stage_costs: np.ndarray
    status: list = field(default_factory=list)
    values: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    upper_violation: list = field(default_factory=list)
    failure: str = ""

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]

    def to_csv(self, path) -> None:
        n = self.states.shape[1]
        m = self.inputs.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k"] + [f"x{i}" for i in range(n)] + [f"u{j}" for j in range(m)]
                       + ["stage_cost", "value", "status"])
            for k in range(self.steps):
                w.writerow([k] + [repr(float(v)) for v in self.states[k]] + [repr(float(v)) for v in self.inputs[k]]
                           + [repr(float(self.stage_costs[k])), repr(float(self.values[k])), self.status[k]])
            if self.failure:
                k = self.steps
                w.writerow([k] + [repr(float(v)) for v in self.states[k]] + [""] * m + ["", "", self.failure])


def _upper_violation(inst: BilevelInstance, U, x) -> float:
    g = inst.upper.evaluate(U, x)
    return float(np.max(g, initial=0.0)) if g.size else 0.0


def simulate(ctrl: ControllerSpec, x0, steps: int) -> ClosedLoopTrace:
    """Apply the first input block of each per-step solution for ``steps`` steps.

    The trace stops early if a per-step problem fails; ``failure`` then names
    the step and the reason and the last state is the one where it failed.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    inst = ctrl.inst
    plant = inst.plant
    m = plant.m
    x = np.asarray(x0, dtype=float).reshape(plant.n)
    states = [x]
    inputs, costs = [], []
    trace = ClosedLoopTrace(ctrl.kind, np.zeros((0, plant.n)), np.zeros((0, m)), np.zeros(0))
    for k in range(steps):
        t0 = time.perf_counter()
        try:
            rep = ctrl.solve(x)
        except InfeasibleProblem as exc:
            trace.failure = f"infeasible at step {k}: {exc}"
            break
        except BmpcError as exc:
            trace.failure = f"{type(exc).__name__} at step {k}: {exc}"
            break
        u = rep.U[:m].copy()
        inputs.append(u)
        costs.append(inst.fu.stage_cost(x, u))
        trace.status.append(rep.status)
        trace.values.append(rep.value)
        trace.wall_times.append(time.perf_counter() - t0)
        trace.upper_violation.append(_upper_violation(inst, rep.U, x))
        x = plant.step(x, u)
        states.append(x)
    trace.states = np.array(states).reshape(-1, plant.n)
    trace.inputs = np.array(inputs).reshape(-1, m)
    trace.stage_costs = np.array(costs)
    return trace


def trace_metrics(trace: ClosedLoopTrace, threshold: float = 1e-3) -> dict:
    """Average stage cost, worst upper violation and settling step of a trace.

    The settling step is the first k from which every later state stays
    within ``threshold`` (infinity norm) of the final state.
    """
    X = trace.states
    if X.shape[0] == 0:
        raise ValueError("empty trace")
    dist = np.max(np.abs(X - X[-1]), axis=1)
    outside = np.flatnonzero(dist >= threshold)
    settle = int(outside[-1] + 1) if outside.size else 0
    return {
        "kind": trace.kind,
        "steps": trace.steps,
        "average_stage_cost": float(np.mean(trace.stage_costs)) if trace.steps else None,
        "max_upper_violation": float(max(trace.upper_violation, default=0.0)),
        "settling_step": settle,
        "final_state": [float(v) for v in X[-1]],
        "total_wall_time": float(sum(trace.wall_times)),
        "failure": trace.failure,
    }


def write_summary(path, summaries) -> None:
    with open(path, "w") as fh:
        json.dump(summaries, fh, indent=2, allow_nan=True)
