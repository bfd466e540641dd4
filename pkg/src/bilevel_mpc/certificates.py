"""A-posteriori bounds on the optimality gap of blocked and hierarchical solutions.

For a strongly convex ``f`` (Hessian-type matrix ``Hhat``) and convex ``g``,
any feasible ``w`` satisfies

    0 <= f(w) - V <= min_{mu >= 0} 1/2 |grad f(w) + grad g_J(w) mu|^2_{Hhat^-1} - g_J(w)' mu

where ``J`` collects the rows with ``g_i(w) >= -eps`` (active rows, up to a
small tolerance, when ``eps = 0``). Enlarging ``J`` can only lower the bound,
so it is nonincreasing in ``eps``. Evaluating it needs one nonnegative
least-squares solve in ``|J|`` multipliers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .blocking import image_contains, restriction_map
from .errors import AssumptionViolation
from .formulations import (
    BilevelInstance,
    _as_matrix,
    reduced_map,
    solve_p0_cascade,
    solve_p2,
    theta_star_map,
    value_of,
)
from .qp import QuadraticProgram, solve_nnls, solve_qp


@dataclass(frozen=True, eq=False)
class ReducedProgram:
    """Reduced problem in w for blocking ``Mhat``: ``U = W w + u0``.

    ``f(w) = F_u(U)``, ``g(w) = G U - rhs`` over the stacked lower and upper
    rows whose coefficients in ``U`` are not identically zero (rows that do
    not depend on the decision are pure feasibility conditions on x0).
    """

    inst: BilevelInstance
    x0: np.ndarray
    Mhat: np.ndarray
    W: np.ndarray
    u0: np.ndarray
    Hhat: np.ndarray
    G: np.ndarray
    rhs: np.ndarray
    rows: np.ndarray
    _chol: np.ndarray
    _basis: np.ndarray

    def U(self, w) -> np.ndarray:
        return self.W @ np.asarray(w, dtype=float) + self.u0

    def f(self, w) -> float:
        return value_of(self.inst, self.U(w), self.x0)

    def grad_f(self, w) -> np.ndarray:
        return self.W.T @ self.inst.fu.gradient(self.U(w), self.x0)

    def g(self, w) -> np.ndarray:
        return self.G @ self.U(w) - self.rhs

    def grad_g(self) -> np.ndarray:
        """Constraint gradients as columns (q x rows); constant because g is affine."""
        return (self.G @ self.W).T

    def whiten(self, r) -> np.ndarray:
        """Map a U-space vector r to v with |v| = |W' r| in the Hhat^-1 metric.

        With Hu = L L' and L' W = Q R, ``W' r`` measured by ``Hhat^-1`` equals
        ``Q' L^-1 r`` in the Euclidean norm; this avoids inverting Hhat, whose
        conditioning is that of Hu times that of W squared.
        """
        return self._basis.T @ solve_triangular(self._chol, r, lower=True)


def reduced_program(inst: BilevelInstance, Mhat, x0) -> ReducedProgram:
    x0 = np.asarray(x0, dtype=float)
    Mhat = _as_matrix(Mhat, inst.nU)
    W, u0 = reduced_map(inst, Mhat, x0)
    Hhat = W.T @ inst.fu.Hu @ W
    Hhat = 0.5 * (Hhat + Hhat.T)
    G, h0, Hx0 = inst.all_constraints
    keep = np.flatnonzero(np.linalg.norm(G, axis=1) > 0)
    L = np.linalg.cholesky(inst.fu.Hu)
    Qb, _ = np.linalg.qr(L.T @ W)
    return ReducedProgram(
        inst=inst, x0=x0, Mhat=Mhat, W=W, u0=u0, Hhat=Hhat,
        G=G[keep], rhs=(h0 + Hx0 @ x0)[keep], rows=keep, _chol=L, _basis=Qb,
    )


@dataclass
class GapCertificate:
    delta: float
    epsilon: float
    index_set: tuple[int, ...]
    mu: np.ndarray
    mfcq_witness: bool
    certified_pair: tuple[str, str]
    issued: bool = True
    reason: str = ""
    value_at_w: float = float("nan")
    violations: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "certified_pair": list(self.certified_pair),
            "issued": self.issued,
            "delta": None if not np.isfinite(self.delta) else float(self.delta),
            "epsilon": float(self.epsilon),
            "index_set": [int(i) for i in self.index_set],
            "mu": [float(v) for v in np.asarray(self.mu).reshape(-1)],
            "mfcq": bool(self.mfcq_witness),
            "value_at_w": None if not np.isfinite(self.value_at_w) else float(self.value_at_w),
            "reason": self.reason,
            "violations": self.violations,
        }


def mfcq_probe(gradients) -> bool:
    """Whether some d satisfies grad_i' d <= -1 for every row of ``gradients``.

    ``gradients`` is k x q (one active constraint gradient per row).
    """
    Gr = np.atleast_2d(np.asarray(gradients, dtype=float))
    if Gr.shape[0] == 0 or Gr.size == 0:
        return True
    norms = np.linalg.norm(Gr, axis=1)
    if np.any(norms == 0):
        return False
    q = Gr.shape[1]
    sol = solve_qp(QuadraticProgram(H=np.eye(q), c=np.zeros(q), Aineq=Gr / norms[:, None], bineq=-np.ones(len(norms))))
    return sol.ok


def _active_tol(g: np.ndarray) -> float:
    return 1e-6 * (1.0 + np.max(np.abs(g), initial=0.0))


def delta_bound(prog: ReducedProgram, w, eps: float = 0.0, tol_active: float | None = None,
                tol_feas: float = 1e-7, pair=("", "")) -> GapCertificate:
    """Gap bound at a feasible ``w`` (plain for eps = 0, tightened for eps > 0)."""
    w = np.asarray(w, dtype=float)
    g = prog.g(w)
    if np.max(g, initial=-np.inf) > tol_feas * (1.0 + np.max(np.abs(prog.rhs), initial=0.0)):
        raise ValueError(f"w is infeasible (max constraint value {np.max(g):.3e})")
    tol_active = _active_tol(g) if tol_active is None else tol_active
    J = np.flatnonzero(g >= -max(eps, tol_active))
    offsets = -np.minimum(g[J], 0.0)
    target = prog.whiten(prog.inst.fu.gradient(prog.U(w), prog.x0))
    grads = prog.whiten(prog.G[J].T) if J.size else np.zeros((target.size, 0))
    mu, delta = solve_nnls(grads, target, np.eye(target.size), offsets)
    active = np.flatnonzero(np.abs(g) <= tol_active)
    witness = mfcq_probe(prog.grad_g()[:, active].T)
    return GapCertificate(
        delta=max(float(delta), 0.0), epsilon=float(eps),
        index_set=tuple(int(prog.rows[j]) for j in J), mu=mu,
        mfcq_witness=witness, certified_pair=tuple(pair), value_at_w=prog.f(w),
    )


def blocked_gap_certificate(inst: BilevelInstance, M, Mhat, x0, eps: float = 0.0) -> GapCertificate:
    """Bound V2(M) - V2(Mhat) from the solution of the blocked problem only."""
    x0 = np.asarray(x0, dtype=float)
    Mm = _as_matrix(M, inst.nU)
    Mh = _as_matrix(Mhat, inst.nU)
    if not image_contains(Mm, Mh):
        raise AssumptionViolation("im(M) is not contained in im(Mhat)")
    rep = solve_p2(inst, x0, Mm)
    return certificate_from_solution(inst, Mm, Mh, x0, rep.Phi, eps)


def certificate_from_solution(inst, M, Mhat, x0, phi_star, eps: float = 0.0) -> GapCertificate:
    """Certificate for a given blocked optimizer ``phi_star`` (avoids re-solving)."""
    pair = ("P2(M)", "P2(Mhat)")
    T = restriction_map(M, Mhat)
    prog_m = reduced_program(inst, M, x0)
    g_m = prog_m.g(phi_star)
    act = np.flatnonzero(np.abs(g_m) <= _active_tol(g_m))
    if not mfcq_probe(prog_m.grad_g()[:, act].T):
        return GapCertificate(
            delta=np.inf, epsilon=eps, index_set=tuple(int(prog_m.rows[j]) for j in act),
            mu=np.zeros(0), mfcq_witness=False, certified_pair=pair, issued=False,
            reason="constraint qualification fails at the blocked optimizer",
        )
    prog = reduced_program(inst, Mhat, x0)
    return delta_bound(prog, T @ phi_star, eps, pair=pair)


def hmpc_gap_certificate(inst: BilevelInstance, x0, eps: float = 0.0) -> GapCertificate:
    """Bound V0 - V2 using only the hierarchical solution."""
    x0 = np.asarray(x0, dtype=float)
    pair = ("P0", "P2")
    rep = solve_p0_cascade(inst, x0)
    U0 = rep.U
    gu = inst.upper.evaluate(U0, x0)
    tol = 1e-8 * (1.0 + np.max(np.abs(inst.upper.rhs(x0)), initial=0.0))
    bad = np.flatnonzero(gu > tol)
    if bad.size:
        labels = inst.upper.labels
        return GapCertificate(
            delta=np.inf, epsilon=eps, index_set=(), mu=np.zeros(0), mfcq_witness=False,
            certified_pair=pair, issued=False, value_at_w=rep.value,
            reason="hierarchical input violates the upper constraints",
            violations=[
                {"row": int(r), "stage": int(labels[r][0]), "constraint": int(labels[r][1]),
                 "value": float(gu[r])}
                for r in bad
            ],
        )
    w = theta_star_map(inst, U0, x0)
    prog = reduced_program(inst, None, x0)
    cert = delta_bound(prog, w, eps, pair=pair)
    if not cert.mfcq_witness:
        cert.issued = False
        cert.reason = "constraint qualification fails at the hierarchical point"
    return cert
