"""Gradient-preserving DEIM on the reduced Jacobian.

The hyper-reduced Hamiltonian replaces ``c^T G(A z)`` by ``c^T PP G(A z)``
with the DEIM projector ``PP = U (P^T U)^{-1} P^T``.  Since
``c^T PP G = w^T (P^T G)`` with ``w = (P^T U)^{-T} U^T c``, the nonlinear
term is a weighted sum of ``m`` entries of ``G`` and its gradient is the
exact gradient of that scalar.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from .reduce import ProjectedNonlinearity, RankError, ReducedModel, left_singular_vectors, numerical_rank

__all__ = [
    "JacobianSnapshotMatrix",
    "DeimProjector",
    "HyperReducedModel",
    "SingularInterpolationError",
    "collect_jacobian_snapshots",
    "pod_basis",
    "deim_indices_greedy",
    "build_projector",
    "hyperreduced_nonlinear_gradient",
    "hyperreduced_hamiltonian",
    "deim_hamiltonian_gap",
]


class SingularInterpolationError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class JacobianSnapshotMatrix:
    """Reduced-Jacobian snapshots ``[J_G(A A^T y_1) A, ...]`` of shape ``(d, 2k * n_snap)``."""

    matrix: np.ndarray
    times: np.ndarray = field(default_factory=lambda: np.empty(0))
    params: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))

    @property
    def n_blocks(self):
        return len(self.times)

    @classmethod
    def concatenate(cls, parts):
        parts = list(parts)
        return cls(
            np.hstack([p.matrix for p in parts]),
            np.concatenate([p.times for p in parts]),
            np.vstack([np.atleast_2d(p.params) for p in parts]),
        )


def collect_jacobian_snapshots(model, A, states, eta, times=None):
    """Reduced-Jacobian blocks at the projections of the full states.

    ``states`` holds one full-order state per column; all columns belong to
    parameter ``eta``.
    """
    A = np.asarray(getattr(A, "A", A))
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[0] != model.N or A.shape[0] != model.N:
        raise ValueError("state/basis dimension does not match the model")
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    proj = ProjectedNonlinearity(model, A, np.arange(model.d), model.c)
    Z = A.T @ states
    blocks = [proj.reduced_jacobian(z, eta) for z in Z.T]
    n_snap = states.shape[1]
    matrix = np.hstack(blocks) if blocks else np.empty((model.d, 0))
    times = np.arange(n_snap, dtype=float) if times is None else np.asarray(times, dtype=float)
    return JacobianSnapshotMatrix(matrix, times, np.tile(eta, (n_snap, 1)))


def pod_basis(M, m=None, tol=None):
    """POD basis of ``M`` and its full singular spectrum.

    Exactly one of ``m`` (fixed size) and ``tol`` (energy tolerance: smallest
    ``m`` with ``sum_{l<=m} s_l^2 >= (1 - tol) sum s_l^2``) should be given.
    """
    M = np.asarray(getattr(M, "matrix", M), dtype=float)
    if (m is None) == (tol is None):
        raise ValueError("give exactly one of m and tol")
    U, sigma = left_singular_vectors(M)
    rank = numerical_rank(sigma, M.shape)
    if tol is not None:
        if rank == 0:
            raise RankError(1, 0)
        energy = np.cumsum(sigma**2) / np.sum(sigma**2)
        m = int(np.searchsorted(energy, 1.0 - tol) + 1)
        m = min(m, rank)
    if m < 1 or m > rank:
        raise RankError(m, rank)
    return U[:, :m].copy(), sigma


def deim_indices_greedy(U):
    """Greedy DEIM interpolation indices of a full-column-rank ``U``."""
    U = np.asarray(U, dtype=float)
    d, m = U.shape
    beta = np.empty(m, dtype=np.intp)
    r = np.abs(U[:, 0])
    for j in range(m):
        if j > 0:
            coef = la.solve(U[beta[:j], :j], U[beta[:j], j])
            r = np.abs(U[:, j] - U[:, :j] @ coef)
        order = np.argsort(-r, kind="stable")
        chosen = set(beta[:j].tolist())
        pick = next((i for i in order if i not in chosen), None)
        if pick is None or r[pick] == 0.0:
            raise SingularInterpolationError(f"DEIM residual vanished at step {j + 1}")
        beta[j] = pick
    return beta


@dataclass
class DeimProjector:
    """DEIM basis ``U``, indices ``beta`` and the cached LU of ``P^T U``.

    ``Utc`` caches ``U^T c`` so that low-rank updates of ``U`` can refresh the
    weights without touching all ``d`` rows.
    """

    U: np.ndarray
    beta: np.ndarray
    lu: tuple
    weights: np.ndarray
    Utc: np.ndarray
    sigma: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def m(self):
        return self.U.shape[1]

    @property
    def d(self):
        return self.U.shape[0]

    def coefficients(self, F_beta):
        """``(P^T U)^{-1} F_beta`` for rows ``beta`` of some ``F``."""
        return la.lu_solve(self.lu, F_beta)

    def apply(self, X):
        """``PP X``."""
        return self.U @ self.coefficients(np.asarray(X)[self.beta])

    def dense(self):
        PtU_inv = la.lu_solve(self.lu, np.eye(self.m))
        Pm = np.zeros((self.m, self.d))
        Pm[np.arange(self.m), self.beta] = 1.0
        return self.U @ PtU_inv @ Pm

    def condition(self):
        return np.linalg.cond(self.U[self.beta])


def build_projector(U, beta, c, sigma=None, Utc=None):
    U = np.asarray(U, dtype=float)
    beta = np.asarray(beta, dtype=np.intp)
    if len(set(beta.tolist())) != beta.size:
        raise SingularInterpolationError("interpolation indices are not distinct")
    PtU = U[beta]
    with warnings.catch_warnings():
        # a zero pivot is turned into SingularInterpolationError below
        warnings.simplefilter("ignore", la.LinAlgWarning)
        lu = la.lu_factor(PtU, check_finite=False)
    if np.any(np.diag(lu[0]) == 0.0):
        raise SingularInterpolationError("P^T U is singular")
    if Utc is None:
        Utc = U.T @ np.asarray(c, dtype=float)
    weights = la.lu_solve(lu, Utc, trans=1)
    return DeimProjector(U, beta, lu, weights, np.asarray(Utc, dtype=float), np.empty(0) if sigma is None else sigma)


class HyperReducedModel(ReducedModel):
    """Reduced model whose nonlinear term is evaluated on the ``m`` DEIM rows."""

    def __init__(self, rom, projector):
        self.model = rom.model
        self.basis = rom.basis
        self.A = rom.A
        self._ops = rom._ops
        self.rom = rom
        self.projector = projector
        self.nonlinear = ProjectedNonlinearity(rom.model, rom.A, projector.beta, projector.weights)

    @property
    def m(self):
        return self.projector.m


def hyperreduced_nonlinear_gradient(hrm, z, eta, counters=None):
    return hrm.nonlinear.gradient(z, np.atleast_1d(np.asarray(eta, float)), counters)


def hyperreduced_hamiltonian(hrm, z, eta, counters=None):
    return hrm.hamiltonian(z, np.atleast_1d(np.asarray(eta, float)), counters)


def deim_hamiltonian_gap(hrm, z, eta):
    """``|c^T (PP - I) G(A z)|``; needs all ``d`` entries (diagnostic only)."""
    g = hrm.model.G(hrm.A @ z, eta)
    return abs(float(hrm.model.c @ (hrm.projector.apply(g) - g)))
