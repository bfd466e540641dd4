"""Dense convex QP solver with exact active sets and multipliers.

Solves

    min  1/2 z' H z + c' z
    s.t. Aeq z = beq
         Aineq z <= bineq

with a primal active-set method. Each iteration solves an equality-constrained
subproblem on the null space of the working constraints, so PSD (singular) H
is handled: directions of zero curvature are followed as rays until a
constraint blocks them.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max_iter"


@dataclass(frozen=True)
class QpTolerances:
    kkt: float = 1e-8
    feas: float = 1e-8
    active: float = 1e-7
    max_iter: int | None = None


_defaults = [QpTolerances()]


@contextmanager
def default_tolerances(tols: QpTolerances):
    """Temporarily replace the tolerances used when ``solve_qp`` gets none."""
    _defaults.append(tols)
    try:
        yield tols
    finally:
        _defaults.pop()


@dataclass
class QuadraticProgram:
    """Container for the QP data. Missing constraint blocks default to empty."""

    H: np.ndarray
    c: np.ndarray
    Aeq: np.ndarray | None = None
    beq: np.ndarray | None = None
    Aineq: np.ndarray | None = None
    bineq: np.ndarray | None = None

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        q = H.shape[0]
        if H.shape != (q, q):
            raise ValueError(f"H must be square, got {H.shape}")
        self.H = 0.5 * (H + H.T)
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        if self.c.shape != (q,):
            raise ValueError(f"c must have length {q}, got {self.c.shape}")
        self.Aeq, self.beq = _block(self.Aeq, self.beq, q, "Aeq")
        self.Aineq, self.bineq = _block(self.Aineq, self.bineq, q, "Aineq")

    @property
    def n_var(self) -> int:
        return self.H.shape[0]

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.H @ z + self.c @ z)


def _block(A, b, q, name):
    if A is None:
        return np.zeros((0, q)), np.zeros(0)
    A = np.asarray(A, dtype=float).reshape(-1, q) if np.size(A) else np.zeros((0, q))
    b = np.asarray(b, dtype=float).reshape(-1)
    if A.shape[0] != b.shape[0]:
        raise ValueError(f"{name} has {A.shape[0]} rows but rhs has {b.shape[0]}")
    return A, b


@dataclass
class KktResiduals:
    stationarity: float
    primal_ineq: float
    primal_eq: float
    complementarity: float


@dataclass
class QpSolution:
    z: np.ndarray
    mu_ineq: np.ndarray
    nu_eq: np.ndarray
    value: float
    active_set: tuple[int, ...]
    status: str
    kkt: KktResiduals | None = None
    iterations: int = 0
    infeasibility: float = 0.0
    working_set: tuple[int, ...] = field(default=())

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def kkt_residuals(qp: QuadraticProgram, z, mu, nu) -> KktResiduals:
    grad = qp.H @ z + qp.c + qp.Aeq.T @ nu + qp.Aineq.T @ mu
    slack = qp.Aineq @ z - qp.bineq
    return KktResiduals(
        stationarity=float(np.max(np.abs(grad), initial=0.0)),
        primal_ineq=float(np.max(slack, initial=0.0)),
        primal_eq=float(np.max(np.abs(qp.Aeq @ z - qp.beq), initial=0.0)),
        complementarity=float(abs(mu @ slack)),
    )


def _orth_rows(rows):
    """Greedy selection of linearly independent rows (in order)."""
    basis = []
    keep = []
    for i, a in enumerate(rows):
        na = np.linalg.norm(a)
        if na == 0.0:
            continue
        r = a.copy()
        for v in basis:
            r -= (v @ r) * v
        # second pass for numerical orthogonality
        for v in basis:
            r -= (v @ r) * v
        nr = np.linalg.norm(r)
        if nr > 1e-9 * na:
            basis.append(r / nr)
            keep.append(i)
    return keep


def _nullspace(A, q):
    if A.shape[0] == 0:
        return np.eye(q)
    _, s, vt = np.linalg.svd(A, full_matrices=True)
    tol = max(A.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > max(tol, 1e-13)))
    return vt[rank:].T


def _phase_one(qp: QuadraticProgram, tols: QpTolerances):
    """Feasible starting point via an LP; returns (z, infeasibility measure)."""
    q = qp.n_var
    nz = np.linalg.norm(qp.Aineq, axis=1) > 0
    A = qp.Aineq[nz]
    b = qp.bineq[nz]
    const_viol = np.max(-qp.bineq[~nz], initial=0.0)
    if A.shape[0] == 0:
        if qp.Aeq.shape[0] == 0:
            return np.zeros(q), const_viol
        z, *_ = np.linalg.lstsq(qp.Aeq, qp.beq, rcond=None)
        return z, max(const_viol, float(np.max(np.abs(qp.Aeq @ z - qp.beq))))
    # scale rows so the elastic variable measures violation per unit row norm
    scale = np.linalg.norm(A, axis=1)
    A_ub = np.hstack([A / scale[:, None], -np.ones((A.shape[0], 1))])
    b_ub = b / scale
    A_eq = np.hstack([qp.Aeq, np.zeros((qp.Aeq.shape[0], 1))]) if qp.Aeq.shape[0] else None
    b_eq = qp.beq if qp.Aeq.shape[0] else None
    cost = np.zeros(q + 1)
    cost[-1] = 1.0
    res = linprog(
        cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
        bounds=[(None, None)] * q + [(0.0, None)], method="highs",
    )
    if res.status != 0:
        # the elastic LP is only infeasible through inconsistent equalities
        z, *_ = np.linalg.lstsq(qp.Aeq, qp.beq, rcond=None)
        return z, max(const_viol, float(np.max(np.abs(qp.Aeq @ z - qp.beq), initial=0.0)), 1.0)
    z = res.x[:q]
    viol = max(
        const_viol,
        float(np.max(A @ z - b, initial=0.0)),
        float(np.max(np.abs(qp.Aeq @ z - qp.beq), initial=0.0)),
    )
    return z, viol


def solve_qp(qp: QuadraticProgram, tols: QpTolerances | None = None) -> QpSolution:
    """Solve a convex QP by a primal active-set method.

    The returned solution carries the primal point, multipliers (``mu_ineq``
    for ``Aineq z <= bineq``, ``nu_eq`` for the equalities, with the sign
    convention ``H z + c + Aeq' nu + Aineq' mu = 0``), the tight inequality
    rows and a KKT residual record. Infeasible or unbounded problems are
    reported through ``status``, never raised.
    """
    tols = tols or _defaults[-1]
    H, c = qp.H, qp.c
    q = qp.n_var
    n_in = qp.Aineq.shape[0]
    n_eq = qp.Aeq.shape[0]
    max_iter = tols.max_iter or 50 * (q + n_in + n_eq + 1)

    z, infeas = _phase_one(qp, tols)
    if infeas > tols.feas * (1.0 + np.max(np.abs(qp.bineq), initial=0.0)):
        return QpSolution(
            z=z, mu_ineq=np.zeros(n_in), nu_eq=np.zeros(n_eq), value=np.nan,
            active_set=(), status=INFEASIBLE, infeasibility=float(infeas),
        )

    Ai = qp.Aineq
    bi = qp.bineq
    row_norm = np.linalg.norm(Ai, axis=1)
    usable = row_norm > 0
    eq_keep = _orth_rows(qp.Aeq)
    Aeq = qp.Aeq[eq_keep]
    b_scale = 1.0 + np.max(np.abs(bi), initial=0.0)
    act_tol = tols.active * b_scale

    # initial working set: tight rows that are independent of the equalities
    working: list[int] = []
    slack = bi - Ai @ z
    candidates = [i for i in range(n_in) if usable[i] and slack[i] <= act_tol]
    if candidates:
        rows = np.vstack([Aeq, Ai[candidates]])
        keep = _orth_rows(rows)
        working = [candidates[k - len(eq_keep)] for k in keep if k >= len(eq_keep)]
    # an equality row that was skipped as zero-norm still needs beq ~ 0 (checked in phase one)

    bland = False
    at_min = False  # previous iteration took an unblocked full step
    status = MAX_ITER
    it = 0
    y = np.zeros(len(eq_keep) + len(working))
    for it in range(1, max_iter + 1):
        g = H @ z + c
        Acur = np.vstack([Aeq, Ai[working]]) if working else Aeq
        N = _nullspace(Acur, q)
        ray = False
        if N.shape[1] == 0:
            p = np.zeros(q)
        else:
            Hr = N.T @ H @ N
            gr = N.T @ g
            lam, V = np.linalg.eigh(0.5 * (Hr + Hr.T))
            pos = lam > 1e-11 * max(1.0, float(np.max(np.abs(lam), initial=0.0)))
            V0 = V[:, ~pos]
            gnull = V0.T @ gr
            if gnull.size and np.linalg.norm(gnull) > 1e-10 * (1.0 + np.linalg.norm(g)):
                p = -N @ (V0 @ gnull)
                ray = True
            else:
                Vp = V[:, pos]
                p = -N @ (Vp @ ((Vp.T @ gr) / lam[pos]))

        small = np.max(np.abs(p), initial=0.0) <= 1e-12 * (1.0 + np.max(np.abs(z), initial=0.0))
        if not ray and (small or at_min):
            # stationary on the working set: inspect multipliers
            if Acur.shape[0]:
                y, *_ = np.linalg.lstsq(Acur.T, -g, rcond=None)
            else:
                y = np.zeros(0)
            mu_w = y[len(eq_keep):]
            dual_tol = 1e-10 * (1.0 + np.max(np.abs(g), initial=0.0) + np.max(np.abs(y), initial=0.0))
            neg = [k for k in range(len(working)) if mu_w[k] < -dual_tol]
            if not neg:
                status = OPTIMAL
                break
            if bland:
                drop = min(neg, key=lambda k: working[k])
            else:
                drop = min(neg, key=lambda k: (mu_w[k], working[k]))
            working.pop(drop)
            at_min = False
            continue

        # ratio test over rows outside the working set
        Ap = Ai @ p
        pn = np.linalg.norm(p)
        alpha = np.inf
        block = -1
        for i in range(n_in):
            if not usable[i] or i in working:
                continue
            if Ap[i] > 1e-12 * row_norm[i] * pn:
                a_i = max(0.0, bi[i] - Ai[i] @ z) / Ap[i]
                if a_i < alpha - 1e-15 * max(1.0, alpha if np.isfinite(alpha) else 1.0):
                    alpha = a_i
                    block = i
        if ray:
            # nearly flat directions may still curve: never step past the line minimizer
            curv = float(p @ H @ p)
            slope = float(g @ p)
            if curv > 0.0 and -slope / curv < alpha:
                alpha = -slope / curv
                block = -1
            elif block < 0:
                status = UNBOUNDED
                break
        elif alpha >= 1.0:
            alpha = 1.0
            block = -1
        z = z + alpha * p
        if block >= 0:
            working.append(block)
            bland = alpha <= 0.0
            at_min = False
        else:
            bland = False
            at_min = not ray

    mu = np.zeros(n_in)
    nu = np.zeros(n_eq)
    if status == OPTIMAL and y.size:
        nu[eq_keep] = y[:len(eq_keep)]
        mu[working] = np.maximum(y[len(eq_keep):], 0.0)
    slack = Ai @ z - bi
    active = tuple(int(i) for i in np.flatnonzero(np.abs(slack) <= act_tol))
    value = qp.objective(z) if status != UNBOUNDED else -np.inf
    return QpSolution(
        z=z, mu_ineq=mu, nu_eq=nu, value=value, active_set=active, status=status,
        kkt=kkt_residuals(qp, z, mu, nu), iterations=it,
        working_set=tuple(sorted(int(i) for i in working)),
    )


def solve_nnls(Gmat, target, metric, offsets=None, tols: QpTolerances | None = None):
    """Weighted nonnegative least squares with a linear offset.

    Returns ``(mu, value)`` where ``mu >= 0`` minimizes

        1/2 || target + Gmat mu ||^2_{metric^-1} + offsets' mu.

    Solved as a ``k``-dimensional QP, so the cost scales with the number of
    columns of ``Gmat`` rather than with its row count.
    """
    target = np.asarray(target, dtype=float).reshape(-1)
    q = target.shape[0]
    Gmat = np.asarray(Gmat, dtype=float).reshape(q, -1)
    k = Gmat.shape[1]
    L = np.linalg.cholesky(0.5 * (np.asarray(metric, dtype=float) + np.asarray(metric, dtype=float).T))
    # whitened quantities: || v ||^2_{metric^-1} = || L^-1 v ||^2
    t = np.linalg.solve(L, target)
    base = 0.5 * float(t @ t)
    if k == 0:
        return np.zeros(0), base
    Gw = np.linalg.solve(L, Gmat)
    off = np.zeros(k) if offsets is None else np.asarray(offsets, dtype=float).reshape(k)
    sub = QuadraticProgram(
        H=Gw.T @ Gw, c=Gw.T @ t + off, Aineq=-np.eye(k), bineq=np.zeros(k),
    )
    sol = solve_qp(sub, tols)
    if not sol.ok:
        raise RuntimeError(f"NNLS subproblem failed with status {sol.status}")
    mu = np.maximum(sol.z, 0.0)
    r = t + Gw @ mu
    return mu, 0.5 * float(r @ r) + float(off @ mu)
