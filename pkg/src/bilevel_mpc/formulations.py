"""Condensed QP formulations of the hierarchical, bilevel and centralized problems.

Every problem lives on the input stack ``U = [u_0; ...; u_{N-1}]`` and, for
the bilevel variants, on the reference stack ``Theta = M Phi``:

* lower tracking problem (``solve_lower``),
* steady-state target problem of the hierarchical scheme (``solve_p0``),
* bilevel problem, solved exactly by complementarity-pattern search
  (``solve_p1_oracle``),
* stationarity-only reduction (``solve_p2``),
* centralized problem (``solve_p3``).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import AssumptionViolation, EnumerationCapExceeded, InfeasibleProblem, SolverFailure
from .lti import (
    LtiPlant,
    PredictionModel,
    blkdiag_weights,
    check_gamma_nonsingular,
    prediction_model,
    steady_state_basis,
)
from .qp import INFEASIBLE, QpSolution, QpTolerances, QuadraticProgram, solve_qp

DEFAULT_ORACLE_CAP = 22


@dataclass(frozen=True, eq=False)
class AffineStageConstraint:
    """Rows ``Cx x_k + Cu u_k <= d`` imposed at the stages in ``stages``.

    ``stages=None`` means every stage ``k = 0..N-1``.
    """

    Cx: np.ndarray
    Cu: np.ndarray
    d: np.ndarray
    stages: tuple[int, ...] | None = None

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.d, dtype=float)).reshape(-1)
        r = d.shape[0]
        Cx = np.asarray(self.Cx, dtype=float).reshape(r, -1)
        Cu = np.asarray(self.Cu, dtype=float).reshape(r, -1)
        if r < 1:
            raise ValueError("a stage constraint needs at least one row")
        object.__setattr__(self, "Cx", Cx)
        object.__setattr__(self, "Cu", Cu)
        object.__setattr__(self, "d", d)
        if self.stages is not None:
            object.__setattr__(self, "stages", tuple(int(k) for k in self.stages))

    @property
    def rows(self) -> int:
        return self.d.shape[0]

    def applies(self, k: int) -> bool:
        return self.stages is None or k in self.stages

    def residual(self, x, u) -> np.ndarray:
        return self.Cx @ x + self.Cu @ u - self.d

    @classmethod
    def input_box(cls, lower, upper, n: int, stages=None):
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        m = upper.shape[0]
        I = np.eye(m)
        return cls(np.zeros((2 * m, n)), np.vstack([I, -I]), np.concatenate([upper, -lower]), stages)

    @classmethod
    def state_upper(cls, index: int, bound: float, n: int, m: int, stages=None):
        Cx = np.zeros((1, n))
        Cx[0, index] = 1.0
        return cls(Cx, np.zeros((1, m)), [bound], stages)


@dataclass(frozen=True, eq=False)
class LiftedConstraints:
    """Stage constraints stacked over the horizon: ``G U <= h0 + Hx0 x0``.

    ``labels[r] = (stage, constraint index, row within constraint)``.
    """

    G: np.ndarray
    h0: np.ndarray
    Hx0: np.ndarray
    labels: tuple[tuple[int, int, int], ...] = ()

    @property
    def rows(self) -> int:
        return self.G.shape[0]

    def rhs(self, x0) -> np.ndarray:
        return self.h0 + self.Hx0 @ np.asarray(x0, dtype=float)

    def evaluate(self, U, x0) -> np.ndarray:
        """Constraint values in ``g <= 0`` form."""
        return self.G @ np.asarray(U, dtype=float) - self.rhs(x0)


def lift_constraints(constraints: Sequence[AffineStageConstraint], model: PredictionModel) -> LiftedConstraints:
    n, m, N = model.n, model.m, model.N
    G_rows, h_rows, H_rows, labels = [], [], [], []
    A = model.plant.A
    Apow = [np.eye(n)]
    for _ in range(N):
        Apow.append(Apow[-1] @ A)
    for k in range(N):
        if k == 0:
            Bk = np.zeros((n, N * m))
        else:
            Bk = model.Bbar[(k - 1) * n:k * n]
        Ek = np.zeros((m, N * m))
        Ek[:, k * m:(k + 1) * m] = np.eye(m)
        for ci, con in enumerate(constraints):
            if con.Cx.shape[1] != n or con.Cu.shape[1] != m:
                raise ValueError(f"constraint {ci} has shapes {con.Cx.shape}/{con.Cu.shape}, plant is n={n}, m={m}")
            if not con.applies(k):
                continue
            G_rows.append(con.Cx @ Bk + con.Cu @ Ek)
            h_rows.append(con.d)
            H_rows.append(-con.Cx @ Apow[k])
            labels.extend((k, ci, r) for r in range(con.rows))
    if not G_rows:
        return LiftedConstraints(np.zeros((0, N * m)), np.zeros(0), np.zeros((0, n)), ())
    return LiftedConstraints(np.vstack(G_rows), np.concatenate(h_rows), np.vstack(H_rows), tuple(labels))


@dataclass(frozen=True, eq=False)
class UpperObjective:
    """Transient extension of the stage cost:

        F_u(U; x0) = 1/2 |x_N - x_t|_P^2 + sum_{k<N} 1/2 |x_k - x_t|_Q^2 + 1/2 |u_k - u_t|_R^2

    stored together with its lifted quadratic form in ``U``.
    """

    x_target: np.ndarray
    u_target: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    Hu: np.ndarray
    _Qstack: np.ndarray
    _Rstack: np.ndarray
    _model: PredictionModel

    def stage_cost(self, x, u) -> float:
        dx = np.asarray(x, dtype=float) - self.x_target
        du = np.asarray(u, dtype=float) - self.u_target
        return float(0.5 * dx @ self.Q @ dx + 0.5 * du @ self.R @ du)

    def terminal_cost(self, x) -> float:
        dx = np.asarray(x, dtype=float) - self.x_target
        return float(0.5 * dx @ self.P @ dx)

    def linear(self, x0) -> np.ndarray:
        mdl = self._model
        Xt = np.tile(self.x_target, mdl.N)
        Ut = np.tile(self.u_target, mdl.N)
        return mdl.Bbar.T @ self._Qstack @ (mdl.Abar @ x0 - Xt) - self._Rstack @ Ut

    def constant(self, x0) -> float:
        mdl = self._model
        ex = mdl.Abar @ x0 - np.tile(self.x_target, mdl.N)
        Ut = np.tile(self.u_target, mdl.N)
        d0 = x0 - self.x_target
        return float(0.5 * ex @ self._Qstack @ ex + 0.5 * Ut @ self._Rstack @ Ut + 0.5 * d0 @ self.Q @ d0)

    def value(self, U, x0) -> float:
        U = np.asarray(U, dtype=float)
        x0 = np.asarray(x0, dtype=float)
        return float(0.5 * U @ self.Hu @ U + self.linear(x0) @ U + self.constant(x0))

    def gradient(self, U, x0) -> np.ndarray:
        return self.Hu @ np.asarray(U, dtype=float) + self.linear(np.asarray(x0, dtype=float))

    def stagewise_value(self, U, x0) -> float:
        mdl = self._model
        X = mdl.plant.rollout(x0, U)
        Us = np.asarray(U, dtype=float).reshape(mdl.N, mdl.m)
        xs = np.vstack([np.asarray(x0, dtype=float)[None, :], X])
        total = self.terminal_cost(xs[-1])
        for k in range(mdl.N):
            total += self.stage_cost(xs[k], Us[k])
        return total


def upper_objective(model: PredictionModel, x_target, u_target, Q, R, P=None) -> UpperObjective:
    n, m, N = model.n, model.m, model.N
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q if P is None else np.atleast_2d(np.asarray(P, dtype=float))
    x_target = np.asarray(x_target, dtype=float).reshape(n)
    u_target = np.asarray(u_target, dtype=float).reshape(m)
    Qs, Rs = blkdiag_weights(Q, P, R, N)
    Hu = model.Bbar.T @ Qs @ model.Bbar + Rs
    Hu = 0.5 * (Hu + Hu.T)
    try:
        np.linalg.cholesky(Hu)
    except np.linalg.LinAlgError:
        raise AssumptionViolation("upper objective is not strongly convex in U") from None
    return UpperObjective(x_target, u_target, Q, R, P, Hu, Qs, Rs, model)


@dataclass(frozen=True, eq=False)
class BilevelInstance:
    model: PredictionModel
    lower: LiftedConstraints
    upper: LiftedConstraints
    fu: UpperObjective
    lower_stage: tuple[AffineStageConstraint, ...] = ()
    upper_stage: tuple[AffineStageConstraint, ...] = ()
    gamma_ratio: float = 1.0

    @property
    def plant(self) -> LtiPlant:
        return self.model.plant

    @property
    def nU(self) -> int:
        return self.model.nU

    @property
    def all_constraints(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked [lower; upper] as (G, h0, Hx0)."""
        return (
            np.vstack([self.lower.G, self.upper.G]),
            np.concatenate([self.lower.h0, self.upper.h0]),
            np.vstack([self.lower.Hx0, self.upper.Hx0]),
        )


def build_instance(
    A, B, N: int, Q, P, R,
    lower: Sequence[AffineStageConstraint] = (),
    upper: Sequence[AffineStageConstraint] = (),
    x_target=None, u_target=None,
    upper_weights: tuple | None = None,
    Qbar=None, Rbar=None,
    rank_tol: float | None = None,
    gamma_tol: float | None = None,
    require_gamma: bool = True,
) -> BilevelInstance:
    """Assemble a bilevel instance from stage data.

    ``upper_weights = (Qu, Ru, Pu)`` defaults to the lower weights. Full
    stacked lower weights may be passed as ``Qbar``/``Rbar`` instead of
    ``Q, P, R``.
    """
    plant = LtiPlant(A, B)
    basis = steady_state_basis(plant, rank_tol)
    if Qbar is None or Rbar is None:
        Qbar, Rbar = blkdiag_weights(Q, P, R, N)
    model = prediction_model(plant, basis, N, Qbar, Rbar)
    ok, ratio = check_gamma_nonsingular(model, gamma_tol)
    if require_gamma and not ok:
        raise AssumptionViolation(f"Gamma is numerically singular (sigma ratio {ratio:.3e})")
    Qu, Ru, Pu = upper_weights if upper_weights is not None else (Q, R, P)
    x_target = np.zeros(plant.n) if x_target is None else x_target
    u_target = np.zeros(plant.m) if u_target is None else u_target
    fu = upper_objective(model, x_target, u_target, Qu, Ru, Pu)
    return BilevelInstance(
        model=model,
        lower=lift_constraints(lower, model),
        upper=lift_constraints(upper, model),
        fu=fu,
        lower_stage=tuple(lower),
        upper_stage=tuple(upper),
        gamma_ratio=ratio,
    )


def toy_instance(N: int = 10) -> BilevelInstance:
    """Double integrator with Ts = 0.3, input box |u| <= 1, position bound p <= 0."""
    Ts = 0.3
    A = np.array([[1.0, Ts], [0.0, 1.0]])
    B = np.array([[0.5 * Ts**2], [Ts]])
    I2 = np.eye(2)
    R = 0.1 * np.eye(1)
    return build_instance(
        A, B, N, I2, I2, R,
        lower=[AffineStageConstraint.input_box([-1.0], [1.0], n=2)],
        upper=[AffineStageConstraint.state_upper(0, 0.0, n=2, m=1)],
        x_target=[1.0, 0.0], u_target=[0.0],
    )


TOY_X0 = np.array([-1.0, 0.0])


def random_instance(rng: np.random.Generator, n: int, m: int, N: int, upper_rows: int = 2) -> BilevelInstance:
    """Random plant with an input box below and state half-spaces above.

    The upper half-spaces contain the origin in their interior, and the upper
    weights and targets differ from the lower ones so that the levels conflict.
    """
    while True:
        A = rng.normal(size=(n, n))
        A *= rng.uniform(0.5, 1.1) / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-6)
        B = rng.normal(size=(n, m))
        Q = np.diag(rng.uniform(0.5, 2.0, n))
        R = np.diag(rng.uniform(0.1, 1.0, m))
        umax = rng.uniform(0.5, 2.0, m)
        C = rng.normal(size=(upper_rows, n))
        C /= np.linalg.norm(C, axis=1, keepdims=True)
        d = rng.uniform(0.3, 1.5, upper_rows)
        try:
            return build_instance(
                A, B, N, Q, Q, R,
                lower=[AffineStageConstraint.input_box(-umax, umax, n)],
                upper=[AffineStageConstraint(C, np.zeros((upper_rows, m)), d)] if upper_rows else [],
                x_target=rng.normal(scale=0.5, size=n), u_target=np.zeros(m),
                upper_weights=(np.diag(rng.uniform(0.5, 2.0, n)), np.diag(rng.uniform(0.05, 1.0, m)), None),
                gamma_tol=1e-8,
            )
        except AssumptionViolation:
            continue


@dataclass
class SolveReport:
    U: np.ndarray
    value: float
    Theta: np.ndarray | None = None
    Phi: np.ndarray | None = None
    lower_multipliers: np.ndarray | None = None
    status: str = "optimal"
    kkt: object = None
    wall_time: float = 0.0
    info: dict = field(default_factory=dict)


def value_of(inst: BilevelInstance, U, x0) -> float:
    """Upper objective F_u(U; x0)."""
    return inst.fu.value(U, x0)


def _as_matrix(blocking, nU: int) -> np.ndarray:
    if blocking is None:
        return np.eye(nU)
    M = getattr(blocking, "M", blocking)
    M = np.asarray(M, dtype=float).reshape(nU, -1)
    return M


def _check(sol: QpSolution, what: str):
    if sol.status == INFEASIBLE:
        raise InfeasibleProblem(f"{what} is infeasible (violation {sol.infeasibility:.3e})", sol.infeasibility)
    if not sol.ok:
        raise SolverFailure(f"{what}: QP solver returned {sol.status}")


def _rows_in_u(inst: BilevelInstance, x0):
    """Lower and upper constraints as (G, rhs) at x0."""
    return inst.lower.G, inst.lower.rhs(x0), inst.upper.G, inst.upper.rhs(x0)


def solve_lower(inst: BilevelInstance, Theta, x0, tols: QpTolerances | None = None) -> SolveReport:
    """Lower tracking QP for a given reference stack."""
    t0 = time.perf_counter()
    mdl = inst.model
    x0 = np.asarray(x0, dtype=float)
    Theta = np.asarray(Theta, dtype=float).reshape(mdl.nU)
    qp = QuadraticProgram(
        H=mdl.Hlow, c=mdl.x0_gain @ x0 - mdl.Gamma @ Theta,
        Aineq=inst.lower.G, bineq=inst.lower.rhs(x0),
    )
    sol = solve_qp(qp, tols)
    _check(sol, "lower problem")
    return SolveReport(
        U=sol.z, value=value_of(inst, sol.z, x0), Theta=Theta, lower_multipliers=sol.mu_ineq,
        kkt=sol.kkt, wall_time=time.perf_counter() - t0,
        info={"lower_value": mdl.lower_objective(sol.z, Theta, x0), "active": sol.active_set},
    )


def steady_state_qp(inst: BilevelInstance) -> QuadraticProgram:
    """Steady-state target problem in the parameter theta."""
    basis = inst.model.basis
    fu = inst.fu
    Zx, Zu = basis.Zx, basis.Zu
    H = Zx.T @ fu.Q @ Zx + Zu.T @ fu.R @ Zu
    c = -(Zx.T @ fu.Q @ fu.x_target + Zu.T @ fu.R @ fu.u_target)
    rows, rhs = [], []
    for con in inst.lower_stage + inst.upper_stage:
        rows.append(con.Cx @ Zx + con.Cu @ Zu)
        rhs.append(con.d)
    if rows:
        return QuadraticProgram(H=H, c=c, Aineq=np.vstack(rows), bineq=np.concatenate(rhs))
    return QuadraticProgram(H=H, c=c)


def solve_p0(inst: BilevelInstance, tols: QpTolerances | None = None):
    """Steady-state target theta* of the hierarchical scheme.

    Returns ``(theta_star, report)``; the report's ``value`` is the stage cost
    at the optimal steady pair.
    """
    t0 = time.perf_counter()
    qp = steady_state_qp(inst)
    sol = solve_qp(qp, tols)
    _check(sol, "steady-state target problem")
    theta = sol.z
    x, u = inst.model.basis.pair(theta)
    report = SolveReport(
        U=np.tile(u, inst.model.N), value=inst.fu.stage_cost(x, u), Theta=hmpc_reference(theta, inst.model.N),
        Phi=theta, kkt=sol.kkt, wall_time=time.perf_counter() - t0,
        info={"x_steady": x, "u_steady": u, "active": sol.active_set},
    )
    return theta, report


def hmpc_reference(theta_star, N: int) -> np.ndarray:
    """Constant-in-horizon stack (1_N kron I_m) theta*."""
    theta_star = np.atleast_1d(np.asarray(theta_star, dtype=float))
    return np.tile(theta_star, N)


def solve_p0_cascade(inst: BilevelInstance, x0, tols: QpTolerances | None = None) -> SolveReport:
    """Hierarchical cascade: steady-state target, then lower tracking. ``value`` is V0."""
    t0 = time.perf_counter()
    theta, _ = solve_p0(inst, tols)
    Theta0 = hmpc_reference(theta, inst.model.N)
    rep = solve_lower(inst, Theta0, x0, tols)
    rep.Phi = theta
    rep.wall_time = time.perf_counter() - t0
    return rep


def theta_star_map(inst: BilevelInstance, U, x0) -> np.ndarray:
    """Unique reference making U stationary for the lower objective."""
    mdl = inst.model
    return mdl.gamma_solve(mdl.Hlow @ np.asarray(U, dtype=float) + mdl.x0_gain @ np.asarray(x0, dtype=float))


def u_star_map(inst: BilevelInstance, Theta, x0) -> np.ndarray:
    """Unconstrained lower minimizer for a reference stack."""
    mdl = inst.model
    return mdl.hlow_solve(mdl.Gamma @ np.asarray(Theta, dtype=float) - mdl.x0_gain @ np.asarray(x0, dtype=float))


def reduced_map(inst: BilevelInstance, M, x0):
    """Affine map Phi -> U*(M Phi; x0) as (W, u0)."""
    mdl = inst.model
    W = mdl.hlow_solve(mdl.Gamma @ M)
    u0 = -mdl.hlow_solve(mdl.x0_gain @ np.asarray(x0, dtype=float))
    return W, u0


def solve_p2(inst: BilevelInstance, x0, blocking=None, method: str = "eliminate",
             tols: QpTolerances | None = None) -> SolveReport:
    """Stationarity-only reduction, optionally with Theta = M Phi.

    ``method="eliminate"`` substitutes ``U = U*(M Phi; x0)`` and solves in Phi;
    ``method="explicit"`` keeps (Phi, U) with the stationarity equality.
    """
    t0 = time.perf_counter()
    x0 = np.asarray(x0, dtype=float)
    mdl = inst.model
    M = _as_matrix(blocking, mdl.nU)
    p = M.shape[1]
    Gl, hl, Gu, hu = _rows_in_u(inst, x0)
    G = np.vstack([Gl, Gu])
    h = np.concatenate([hl, hu])
    lin = inst.fu.linear(x0)
    if method == "eliminate":
        W, u0 = reduced_map(inst, M, x0)
        if p == 0:
            U = u0
            viol = float(np.max(G @ U - h, initial=0.0))
            if viol > 1e-8 * (1.0 + np.max(np.abs(h), initial=0.0)):
                raise InfeasibleProblem("reduced problem is infeasible for an empty blocking", viol)
            Phi = np.zeros(0)
            mult = np.zeros(G.shape[0])
            kkt = None
        else:
            qp = QuadraticProgram(
                H=W.T @ inst.fu.Hu @ W, c=W.T @ (inst.fu.Hu @ u0 + lin),
                Aineq=G @ W, bineq=h - G @ u0,
            )
            sol = solve_qp(qp, tols)
            _check(sol, "reduced bilevel problem")
            Phi = sol.z
            U = W @ Phi + u0
            mult = sol.mu_ineq
            kkt = sol.kkt
    elif method == "explicit":
        nU = mdl.nU
        H = np.zeros((p + nU, p + nU))
        H[p:, p:] = inst.fu.Hu
        qp = QuadraticProgram(
            H=H, c=np.concatenate([np.zeros(p), lin]),
            Aeq=np.hstack([-mdl.Gamma @ M, mdl.Hlow]), beq=-mdl.x0_gain @ x0,
            Aineq=np.hstack([np.zeros((G.shape[0], p)), G]), bineq=h,
        )
        sol = solve_qp(qp, tols)
        _check(sol, "reduced bilevel problem")
        Phi, U = sol.z[:p], sol.z[p:]
        mult = sol.mu_ineq
        kkt = sol.kkt
    else:
        raise ValueError(f"unknown method {method!r}")
    nl = Gl.shape[0]
    return SolveReport(
        U=U, value=value_of(inst, U, x0), Theta=M @ Phi, Phi=Phi,
        lower_multipliers=mult[:nl], kkt=kkt, wall_time=time.perf_counter() - t0,
        info={"upper_multipliers": mult[nl:]},
    )


def solve_p3(inst: BilevelInstance, x0, tols: QpTolerances | None = None) -> SolveReport:
    """Centralized problem: minimize F_u over both constraint sets."""
    t0 = time.perf_counter()
    x0 = np.asarray(x0, dtype=float)
    Gl, hl, Gu, hu = _rows_in_u(inst, x0)
    qp = QuadraticProgram(
        H=inst.fu.Hu, c=inst.fu.linear(x0),
        Aineq=np.vstack([Gl, Gu]), bineq=np.concatenate([hl, hu]),
    )
    sol = solve_qp(qp, tols)
    _check(sol, "centralized problem")
    nl = Gl.shape[0]
    return SolveReport(
        U=sol.z, value=value_of(inst, sol.z, x0), lower_multipliers=sol.mu_ineq[:nl],
        kkt=sol.kkt, wall_time=time.perf_counter() - t0,
        info={"upper_multipliers": sol.mu_ineq[nl:]},
    )


# ---------------------------------------------------------------------------
# exact bilevel solution by complementarity-pattern search


def _pattern_qp(inst, x0, M, active, free):
    """QP over (Phi, U, mu) for a partial complementarity pattern.

    Rows in ``active`` hold with equality and carry mu >= 0, rows in ``free``
    are ordinary inequalities that still carry mu >= 0 (relaxed
    complementarity); all other lower rows have mu = 0.
    """
    mdl = inst.model
    p, nU = M.shape[1], mdl.nU
    Gl, hl, Gu, hu = _rows_in_u(inst, x0)
    withmu = sorted(active) + sorted(free)
    k = len(withmu)
    nv = p + nU + k
    H = np.zeros((nv, nv))
    H[p:p + nU, p:p + nU] = inst.fu.Hu
    c = np.zeros(nv)
    c[p:p + nU] = inst.fu.linear(x0)
    stat = np.hstack([-mdl.Gamma @ M, mdl.Hlow, Gl[withmu].T if k else np.zeros((nU, 0))])
    act = sorted(active)
    Aeq = [stat]
    beq = [-mdl.x0_gain @ x0]
    if act:
        Aeq.append(np.hstack([np.zeros((len(act), p)), Gl[act], np.zeros((len(act), k))]))
        beq.append(hl[act])
    ineq_rows = [i for i in range(Gl.shape[0]) if i not in active]
    Ai = [
        np.hstack([np.zeros((len(ineq_rows), p)), Gl[ineq_rows], np.zeros((len(ineq_rows), k))]),
        np.hstack([np.zeros((Gu.shape[0], p)), Gu, np.zeros((Gu.shape[0], k))]),
        np.hstack([np.zeros((k, p + nU)), -np.eye(k)]),
    ]
    bi = [hl[ineq_rows], hu, np.zeros(k)]
    qp = QuadraticProgram(H=H, c=c, Aeq=np.vstack(Aeq), beq=np.concatenate(beq),
                          Aineq=np.vstack(Ai), bineq=np.concatenate(bi))
    return qp, withmu


def _unpack(sol, M, nU, withmu, nl):
    p = M.shape[1]
    Phi = sol.z[:p]
    U = sol.z[p:p + nU]
    mu = np.zeros(nl)
    if withmu:
        mu[withmu] = np.maximum(sol.z[p + nU:], 0.0)
    return Phi, U, mu


def solve_p1_oracle(inst: BilevelInstance, x0, blocking=None, cap: int = DEFAULT_ORACLE_CAP,
                    method: str = "branch_and_bound", tols: QpTolerances | None = None) -> SolveReport:
    """Global optimum of the (blocked) bilevel problem.

    The lower problem is replaced by its KKT system; for a fixed
    complementarity pattern (which lower rows are tight, which carry zero
    multipliers) the problem is a convex QP, and the best pattern gives the
    exact bilevel optimum.

    ``method="enumerate"`` visits every pattern (pruning subsets whose tight
    rows are jointly infeasible) and breaks value ties toward the
    lexicographically smallest pattern. ``method="branch_and_bound"`` relaxes
    undecided complementarity pairs, branches on the most violated one and
    prunes by value; it returns the same optimal value far faster.
    """
    t0 = time.perf_counter()
    x0 = np.asarray(x0, dtype=float)
    mdl = inst.model
    nU = mdl.nU
    M = _as_matrix(blocking, nU)
    nl = inst.lower.rows
    if nl > cap:
        raise EnumerationCapExceeded(f"{nl} lower rows exceed the oracle cap of {cap}; shrink N")
    hl = inst.lower.rhs(x0)
    scale = 1.0 + np.max(np.abs(hl), initial=0.0)

    if method == "enumerate":
        best, nodes = _enumerate_patterns(inst, x0, M, nl, scale, tols)
    elif method == "branch_and_bound":
        best, nodes = _branch_and_bound(inst, x0, M, nl, scale, tols)
    else:
        raise ValueError(f"unknown method {method!r}")
    if best is None:
        raise InfeasibleProblem(f"bilevel problem is infeasible for every complementarity pattern ({nodes} nodes)")
    U = best["U"]
    return SolveReport(
        U=U, value=value_of(inst, U, x0), Theta=M @ best["Phi"], Phi=best["Phi"],
        lower_multipliers=best["mu"], kkt=best["kkt"], wall_time=time.perf_counter() - t0,
        info={"pattern": best["pattern"], "nodes": nodes, "method": method},
    )


def _enumerate_patterns(inst, x0, M, nl, scale, tols):
    Gl, hl = inst.lower.G, inst.lower.rhs(x0)
    Gu, hu = inst.upper.G, inst.upper.rhs(x0)
    nU = inst.model.nU
    state = {"best": None, "nodes": 0}

    def tight_set_feasible(active):
        act = sorted(active)
        qp = QuadraticProgram(
            H=np.zeros((nU, nU)), c=np.zeros(nU),
            Aeq=Gl[act] if act else None, beq=hl[act] if act else None,
            Aineq=np.vstack([Gl, Gu]), bineq=np.concatenate([hl, hu]),
        )
        return solve_qp(qp, tols).status != INFEASIBLE

    def leaf(active):
        state["nodes"] += 1
        qp, withmu = _pattern_qp(inst, x0, M, active, ())
        sol = solve_qp(qp, tols)
        if not sol.ok:
            return
        Phi, U, mu = _unpack(sol, M, nU, withmu, nl)
        v = value_of(inst, U, x0)
        pat = tuple(sorted(active))
        b = state["best"]
        tie = 1e-9 * (1.0 + abs(v))
        if b is None or v < b["value"] - tie or (abs(v - b["value"]) <= tie and pat < b["pattern"]):
            state["best"] = {"value": v, "U": U, "Phi": Phi, "mu": mu, "pattern": pat, "kkt": sol.kkt}

    def recurse(i, active):
        if i == nl:
            leaf(active)
            return
        recurse(i + 1, active)
        grown = active | {i}
        if tight_set_feasible(grown):
            recurse(i + 1, grown)

    recurse(0, frozenset())
    return state["best"], state["nodes"]


def _branch_and_bound(inst, x0, M, nl, scale, tols):
    nU = inst.model.nU
    Gl, hl = inst.lower.G, inst.lower.rhs(x0)
    best = None
    # the mu = 0 pattern is complementary by construction: seed with the reduction
    try:
        r2 = solve_p2(inst, x0, M, tols=tols)
        tight = np.flatnonzero(np.abs(Gl @ r2.U - hl) <= 1e-7 * scale)
        best = {"value": r2.value, "U": r2.U, "Phi": r2.Phi, "mu": np.zeros(nl),
                "pattern": tuple(int(i) for i in tight), "kkt": r2.kkt}
    except InfeasibleProblem:
        pass
    stack = [(frozenset(), frozenset())]  # (active, inactive)
    nodes = 0
    while stack:
        active, inactive = stack.pop()
        nodes += 1
        free = [i for i in range(nl) if i not in active and i not in inactive]
        qp, withmu = _pattern_qp(inst, x0, M, active, free)
        sol = solve_qp(qp, tols)
        if not sol.ok:
            continue
        Phi, U, mu = _unpack(sol, M, nU, withmu, nl)
        v = value_of(inst, U, x0)
        if best is not None and v >= best["value"] - 1e-9 * (1.0 + abs(best["value"])):
            continue
        slack = hl - Gl @ U
        viol = [(min(mu[i], slack[i]), i) for i in free]
        worst = max(viol, default=(0.0, -1), key=lambda t: (t[0], -t[1]))
        mscale = 1.0 + np.max(mu, initial=0.0)
        if worst[1] < 0 or worst[0] <= 1e-9 * max(scale, mscale):
            pat = tuple(sorted(set(active) | {i for i in free if slack[i] <= 1e-7 * scale}))
            best = {"value": v, "U": U, "Phi": Phi, "mu": mu, "pattern": pat, "kkt": sol.kkt}
            continue
        i = worst[1]
        stack.append((active | {i}, inactive))
        stack.append((active, inactive | {i}))
    return best, nodes
