"""Blocking matrices Theta = M Phi: families, inclusion tests, and construction from HMPC data."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AssumptionViolation
from .lti import canonical_signs


def numerical_rank(M: np.ndarray, rel_tol: float | None = None) -> int:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0:
        return 0
    rel_tol = max(M.shape) * np.finfo(float).eps if rel_tol is None else rel_tol
    return int(np.sum(s > rel_tol * s[0]))


@dataclass(frozen=True, eq=False)
class BlockingMatrix:
    M: np.ndarray
    tol: float | None = None

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float)
        if M.ndim != 2:
            raise ValueError(f"blocking matrix must be 2-D, got shape {M.shape}")
        object.__setattr__(self, "M", M)
        if M.shape[1] and numerical_rank(M, self.tol) != M.shape[1]:
            raise AssumptionViolation(f"blocking matrix of shape {M.shape} is not full column rank")

    @property
    def p(self) -> int:
        return self.M.shape[1]

    @property
    def rows(self) -> int:
        return self.M.shape[0]

    def to_dict(self) -> dict:
        return {"rows": self.rows, "cols": self.p, "data": self.M.reshape(-1).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BlockingMatrix":
        rows, cols = int(d["rows"]), int(d["cols"])
        data = np.asarray(d["data"], dtype=float)
        if data.size != rows * cols:
            raise ValueError(f"blocking data has {data.size} entries, expected {rows}x{cols}")
        return cls(data.reshape(rows, cols))


def one_block(N: int, m: int) -> BlockingMatrix:
    """Constant-in-horizon stacker 1_N kron I_m."""
    return BlockingMatrix(np.kron(np.ones((N, 1)), np.eye(m)))


def leading_free(i: int, N: int, m: int) -> BlockingMatrix:
    """First ``i`` steps free, the remaining ``N - i`` tied to step ``i``."""
    if not 1 <= i <= N:
        raise ValueError(f"i must lie in [1, {N}], got {i}")
    base = np.zeros((N, i))
    base[:i, :i] = np.eye(i)
    base[i:, i - 1] = 1.0
    return BlockingMatrix(np.kron(base, np.eye(m)))


def image_contains(M, Mhat, tol: float | None = None) -> bool:
    """True iff im(M) is a subset of im(Mhat), via rank Mhat == rank [M, Mhat]."""
    M = getattr(M, "M", M)
    Mhat = getattr(Mhat, "M", Mhat)
    M = np.asarray(M, dtype=float)
    Mhat = np.asarray(Mhat, dtype=float)
    if M.shape[0] != Mhat.shape[0]:
        raise ValueError(f"row counts differ: {M.shape[0]} vs {Mhat.shape[0]}")
    if tol is None:
        tol = 1e-9
    return numerical_rank(np.hstack([M, Mhat]), tol) == numerical_rank(Mhat, tol)


def restriction_map(M, Mhat) -> np.ndarray:
    """T = pinv(Mhat) M, checked to satisfy Mhat T = M."""
    M = np.asarray(getattr(M, "M", M), dtype=float)
    Mhat = np.asarray(getattr(Mhat, "M", Mhat), dtype=float)
    T = np.linalg.pinv(Mhat) @ M
    res = np.linalg.norm(Mhat @ T - M)
    if res > 1e-9 * max(np.linalg.norm(M), 1.0):
        raise AssumptionViolation(f"im(M) is not contained in im(Mhat) (residual {res:.3e})")
    return T


def orth(X: np.ndarray, rel_tol: float = 1e-8) -> np.ndarray:
    """Orthonormal basis of the column span of X (singular values above rel_tol * sigma_1)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.size == 0:
        return np.zeros((X.shape[0], 0))
    U, s, _ = np.linalg.svd(X, full_matrices=False)
    if s[0] == 0.0:
        return np.zeros((X.shape[0], 0))
    r = int(np.sum(s > rel_tol * s[0]))
    return canonical_signs(U[:, :r])


def sample_initial_states(center, half_width, count: int, seed: int | None = 0) -> np.ndarray:
    """Uniform samples in the box center +/- half_width (rows)."""
    center = np.asarray(center, dtype=float)
    rng = np.random.default_rng(seed)
    return center + rng.uniform(-1.0, 1.0, size=(count, center.size)) * half_width


def construct_from_p0(inst, samples: Sequence, tol: float = 1e-8) -> BlockingMatrix:
    """Low-rank blocking matrix containing the references that reproduce HMPC inputs.

    For every sample x0 the hierarchical input U0(x0) is computed, mapped to
    the reference that makes it an unconstrained lower optimum, and the span
    of those references is orthonormalized. Each sample then satisfies
    V2(M; x0) <= V0(x0).
    """
    from .formulations import hmpc_reference, solve_lower, solve_p0, theta_star_map

    samples = [np.asarray(x, dtype=float) for x in samples]
    if not samples:
        raise ValueError("Algorithm needs at least one sample")
    theta, _ = solve_p0(inst)
    Theta0 = hmpc_reference(theta, inst.model.N)
    cols = []
    for x0 in samples:
        U0 = solve_lower(inst, Theta0, x0).U
        cols.append(theta_star_map(inst, U0, x0))
    return BlockingMatrix(orth(np.column_stack(cols), tol))
