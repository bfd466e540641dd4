"""LTI plant, steady-state parameterization and condensed prediction matrices."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import block_diag, cho_factor, cho_solve, lu_factor, lu_solve

from .errors import AssumptionViolation


def _default_rel_tol(shape) -> float:
    return max(shape) * np.finfo(float).eps


def canonical_signs(V: np.ndarray, rel: float = 1e-12) -> np.ndarray:
    """Flip columns so the first entry of non-negligible size is nonnegative."""
    V = np.array(V, dtype=float, copy=True)
    for j in range(V.shape[1]):
        col = V[:, j]
        big = np.flatnonzero(np.abs(col) > rel * max(np.max(np.abs(col), initial=0.0), 1e-300))
        if big.size and col[big[0]] < 0:
            V[:, j] = -col
    return V


@dataclass(frozen=True, eq=False)
class LtiPlant:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise ValueError(f"A must be a nonempty square matrix, got shape {A.shape}")
        if B.ndim != 2 or B.shape[0] != A.shape[0] or B.shape[1] < 1:
            raise ValueError(f"B must have shape ({A.shape[0]}, m) with m >= 1, got {B.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def S(self) -> np.ndarray:
        """Steady-state operator [I - A, -B]."""
        return np.hstack([np.eye(self.n) - self.A, -self.B])

    def step(self, x, u) -> np.ndarray:
        return self.A @ np.asarray(x, dtype=float) + self.B @ np.asarray(u, dtype=float)

    def rollout(self, x0, U) -> np.ndarray:
        """States x_1..x_N (rows) produced by the input stack U."""
        U = np.asarray(U, dtype=float).reshape(-1, self.m)
        x = np.asarray(x0, dtype=float)
        out = []
        for u in U:
            x = self.step(x, u)
            out.append(x)
        return np.array(out).reshape(len(U), self.n)


def check_full_row_rank(plant: LtiPlant, tol: float | None = None) -> bool:
    """True iff S = [I-A, -B] has numerical rank n (sigma_n > tol * sigma_1)."""
    S = plant.S
    s = np.linalg.svd(S, compute_uv=False)
    tol = _default_rel_tol(S.shape) if tol is None else tol
    if s[0] == 0.0:
        return False
    return bool(s[plant.n - 1] > tol * s[0])


@dataclass(frozen=True, eq=False)
class SteadyStateBasis:
    Z: np.ndarray
    n: int
    m: int
    tol: float

    @property
    def Zx(self) -> np.ndarray:
        return self.Z[: self.n]

    @property
    def Zu(self) -> np.ndarray:
        return self.Z[self.n:]

    def pair(self, theta):
        """Steady pair (x, u) for parameter theta."""
        z = self.Z @ np.asarray(theta, dtype=float).reshape(self.m)
        return z[: self.n], z[self.n:]


def steady_state_basis(plant: LtiPlant, tol: float | None = None) -> SteadyStateBasis:
    """Orthonormal basis of ker [I-A, -B] with a fixed sign convention."""
    S = plant.S
    tol = _default_rel_tol(S.shape) if tol is None else tol
    if not check_full_row_rank(plant, tol):
        raise AssumptionViolation("[I-A, -B] is rank deficient; steady states are not m-dimensional")
    _, s, vt = np.linalg.svd(S, full_matrices=True)
    Z = canonical_signs(vt[plant.n:].T)
    if Z.shape[1] != plant.m:
        raise AssumptionViolation(f"kernel of S has dimension {Z.shape[1]}, expected {plant.m}")
    return SteadyStateBasis(Z=Z, n=plant.n, m=plant.m, tol=tol)


def blkdiag_weights(Q, P, R, N: int):
    """Stacked weights blkdiag(Q,...,Q,P) and blkdiag(R,...,R) over N steps."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if N < 1:
        raise ValueError("horizon N must be >= 1")
    _require_pd(R, "R")
    Qbar = block_diag(*([Q] * (N - 1) + [P]))
    Rbar = block_diag(*([R] * N))
    return Qbar, Rbar


def _require_psd(M, name, rel=1e-10):
    if not np.allclose(M, M.T, atol=1e-12 * max(1.0, np.max(np.abs(M), initial=0.0))):
        raise ValueError(f"{name} is not symmetric")
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    if w.size and w[0] < -rel * max(1.0, abs(w[-1])):
        raise ValueError(f"{name} is not positive semidefinite (min eigenvalue {w[0]:.3e})")


def _require_pd(M, name):
    try:
        np.linalg.cholesky(0.5 * (M + M.T))
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} is not positive definite") from None


def prediction_stacks(plant: LtiPlant, N: int):
    """Abar (Nn x n) and Bbar (Nn x Nm) so that [x_1; ...; x_N] = Abar x0 + Bbar U."""
    n, m = plant.n, plant.m
    powers = [np.eye(n)]
    for _ in range(N):
        powers.append(powers[-1] @ plant.A)
    Abar = np.vstack(powers[1:])
    Bbar = np.zeros((N * n, N * m))
    for k in range(N):
        for j in range(k + 1):
            Bbar[k * n:(k + 1) * n, j * m:(j + 1) * m] = powers[k - j] @ plant.B
    return Abar, Bbar


@dataclass(frozen=True, eq=False)
class PredictionModel:
    """Condensed horizon data for the lower tracking problem.

    ``Gamma`` and ``Hlow`` define the stationarity relation
    ``Hlow U - Gamma Theta + Bbar' Qbar Abar x0 = 0`` of the lower objective.
    """

    plant: LtiPlant
    basis: SteadyStateBasis
    N: int
    Abar: np.ndarray
    Bbar: np.ndarray
    Zxbar: np.ndarray
    Zubar: np.ndarray
    Qbar: np.ndarray
    Rbar: np.ndarray
    Gamma: np.ndarray
    Hlow: np.ndarray

    @property
    def n(self) -> int:
        return self.plant.n

    @property
    def m(self) -> int:
        return self.plant.m

    @property
    def nU(self) -> int:
        return self.N * self.plant.m

    @cached_property
    def _hlow_chol(self):
        return cho_factor(self.Hlow)

    @cached_property
    def _gamma_lu(self):
        return lu_factor(self.Gamma)

    @cached_property
    def x0_gain(self) -> np.ndarray:
        """Bbar' Qbar Abar, the x0 coefficient in the lower gradient."""
        return self.Bbar.T @ self.Qbar @ self.Abar

    def states(self, U, x0) -> np.ndarray:
        return self.Abar @ np.asarray(x0, dtype=float) + self.Bbar @ np.asarray(U, dtype=float)

    def lower_objective(self, U, Theta, x0) -> float:
        dx = self.states(U, x0) - self.Zxbar @ Theta
        du = np.asarray(U, dtype=float) - self.Zubar @ Theta
        return float(0.5 * dx @ self.Qbar @ dx + 0.5 * du @ self.Rbar @ du)

    def lower_gradient(self, U, Theta, x0) -> np.ndarray:
        return self.Hlow @ U - self.Gamma @ Theta + self.x0_gain @ np.asarray(x0, dtype=float)

    def hlow_solve(self, rhs) -> np.ndarray:
        return cho_solve(self._hlow_chol, rhs)

    def gamma_solve(self, rhs) -> np.ndarray:
        return lu_solve(self._gamma_lu, rhs)


def prediction_model(plant: LtiPlant, basis: SteadyStateBasis, N: int, Qbar, Rbar) -> PredictionModel:
    if N < 1:
        raise ValueError("horizon N must be >= 1")
    n, m = plant.n, plant.m
    Qbar = np.atleast_2d(np.asarray(Qbar, dtype=float))
    Rbar = np.atleast_2d(np.asarray(Rbar, dtype=float))
    if Qbar.shape != (N * n, N * n):
        raise ValueError(f"Qbar must be {N * n}x{N * n}, got {Qbar.shape}")
    if Rbar.shape != (N * m, N * m):
        raise ValueError(f"Rbar must be {N * m}x{N * m}, got {Rbar.shape}")
    _require_psd(Qbar, "Qbar")
    _require_pd(Rbar, "Rbar")
    Qbar = 0.5 * (Qbar + Qbar.T)
    Rbar = 0.5 * (Rbar + Rbar.T)
    Abar, Bbar = prediction_stacks(plant, N)
    Zxbar = np.kron(np.eye(N), basis.Zx)
    Zubar = np.kron(np.eye(N), basis.Zu)
    Gamma = Bbar.T @ Qbar @ Zxbar + Rbar @ Zubar
    Hlow = Bbar.T @ Qbar @ Bbar + Rbar
    Hlow = 0.5 * (Hlow + Hlow.T)
    return PredictionModel(plant, basis, N, Abar, Bbar, Zxbar, Zubar, Qbar, Rbar, Gamma, Hlow)


def check_gamma_nonsingular(model: PredictionModel, tol: float | None = None):
    """Return (nonsingular, sigma_min / sigma_max) for Gamma."""
    s = np.linalg.svd(model.Gamma, compute_uv=False)
    tol = _default_rel_tol(model.Gamma.shape) if tol is None else tol
    ratio = float(s[-1] / s[0]) if s[0] > 0 else 0.0
    return bool(ratio > tol), ratio
