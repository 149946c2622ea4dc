"""Orthosymplectic reduced bases and the projected (reduced) model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from .model import poisson_apply

__all__ = [
    "RankError",
    "BasisCertificationError",
    "SymplecticBasis",
    "SnapshotSet",
    "ReducedModel",
    "ProjectedNonlinearity",
    "complex_svd_basis",
    "cotangent_lift_basis",
    "left_singular_vectors",
    "numerical_rank",
    "assemble_rom",
    "project_initial",
    "orthosymplectic_residuals",
]

#: above this columns/rows ratio the left singular vectors come from the Gram matrix
GRAM_RATIO = 8


class RankError(ValueError):
    """Requested more basis vectors than the data supports."""

    def __init__(self, requested, attainable):
        super().__init__(f"requested {requested} basis vectors but numerical rank is {attainable}")
        self.requested = requested
        self.attainable = attainable


class BasisCertificationError(ValueError):
    pass


def numerical_rank(sigma, shape):
    sigma = np.asarray(sigma)
    if sigma.size == 0 or sigma[0] == 0:
        return 0
    tol = max(shape) * np.finfo(float).eps * sigma[0]
    return int(np.count_nonzero(sigma > tol))


def left_singular_vectors(M, k=None, gram_ratio=GRAM_RATIO):
    """Dominant left singular vectors and the full singular spectrum of ``M``.

    Uses a thin SVD, or the eigen-decomposition of ``M M^H`` when ``M`` is
    very wide (method of snapshots).  In the Gram path singular values below
    ``sqrt(eps) * sigma_max`` are not resolved.
    """
    rows, cols = M.shape
    if cols > gram_ratio * rows:
        Gm = M @ M.conj().T
        lam, V = la.eigh(Gm)
        order = np.argsort(lam)[::-1]
        lam, V = lam[order], V[:, order]
        sigma = np.sqrt(np.clip(lam, 0.0, None))
        U = V
    else:
        U, sigma, _ = la.svd(M, full_matrices=False, lapack_driver="gesdd")
    if k is not None:
        U = U[:, :k]
    return U, sigma


@dataclass(frozen=True)
class SnapshotSet:
    """Full-order states as columns with their ``(time, parameter)`` labels."""

    matrix: np.ndarray
    times: np.ndarray
    params: np.ndarray

    def __post_init__(self):
        if self.matrix.shape[1] != len(self.times) or len(self.times) != len(self.params):
            raise ValueError("column count must match label count")

    @classmethod
    def concatenate(cls, sets):
        sets = list(sets)
        return cls(
            np.hstack([s.matrix for s in sets]),
            np.concatenate([s.times for s in sets]),
            np.vstack([np.atleast_2d(s.params) for s in sets]),
        )


def orthosymplectic_residuals(A):
    """``(max|A^T A - I|, max|A^T J A - J|)``."""
    k2 = A.shape[1]
    ortho = np.abs(A.T @ A - np.eye(k2)).max()
    J2k = poisson_apply(np.eye(k2))
    sympl = np.abs(A.T @ poisson_apply(A) - J2k).max()
    return float(ortho), float(sympl)


@dataclass(frozen=True)
class SymplecticBasis:
    A: np.ndarray
    kind: str
    sigma: np.ndarray = field(default_factory=lambda: np.empty(0))
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A.setflags(write=False)

    @property
    def k(self):
        return self.A.shape[1] // 2

    @property
    def N(self):
        return self.A.shape[0]

    def residuals(self):
        return orthosymplectic_residuals(self.A)

    def certify(self, tol=1e-12):
        ortho, sympl = self.residuals()
        if ortho > tol or sympl > tol:
            raise BasisCertificationError(
                f"basis fails orthosymplectic check: |A^TA-I|={ortho:.2e}, |A^TJA-J|={sympl:.2e}"
            )
        return ortho, sympl


def _split(Y):
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] % 2:
        raise ValueError("snapshot matrix must be 2n x n_snap")
    n = Y.shape[0] // 2
    return Y[:n], Y[n:]


def complex_svd_basis(snapshots, k, gram_ratio=GRAM_RATIO):
    """Orthosymplectic basis from the SVD of the complex snapshots ``q + i p``.

    Returns ``A = [[Re Phi, -Im Phi], [Im Phi, Re Phi]]`` with ``Phi`` the
    ``k`` dominant left singular vectors.
    """
    Y = snapshots.matrix if isinstance(snapshots, SnapshotSet) else snapshots
    Q, P = _split(Y)
    if not np.any(Q) and not np.any(P):
        raise RankError(k, 0)
    Phi, sigma = left_singular_vectors(Q + 1j * P, gram_ratio=gram_ratio)
    rank = numerical_rank(sigma, Q.shape)
    if k > rank:
        raise RankError(k, rank)
    Phi = Phi[:, :k]
    A = np.block([[Phi.real, -Phi.imag], [Phi.imag, Phi.real]])
    return SymplecticBasis(np.ascontiguousarray(A), "complex-svd", sigma)


def cotangent_lift_basis(snapshots, k, gram_ratio=GRAM_RATIO):
    """Orthosymplectic basis ``diag(Phi, Phi)`` from the SVD of ``[Q, P]``."""
    Y = snapshots.matrix if isinstance(snapshots, SnapshotSet) else snapshots
    Q, P = _split(Y)
    M = np.hstack([Q, P])
    if not np.any(M):
        raise RankError(k, 0)
    Phi, sigma = left_singular_vectors(M, gram_ratio=gram_ratio)
    rank = numerical_rank(sigma, M.shape)
    if k > rank:
        raise RankError(k, rank)
    Phi = Phi[:, :k]
    Z = np.zeros_like(Phi)
    A = np.block([[Phi, Z], [Z, Phi]])
    return SymplecticBasis(np.ascontiguousarray(A), "cotangent-lift", sigma)


def project_initial(A, y0):
    A = A.A if isinstance(A, SymplecticBasis) else A
    return A.T @ y0


def _param(eta):
    return np.atleast_1d(np.asarray(eta, dtype=float))


class ProjectedNonlinearity:
    """Nonlinear part ``sum_i w_i G_i(A z)`` over a subset of rows.

    With ``rows = all`` and ``weights = c`` this is the reduced model; with the
    DEIM interpolation rows and weights ``(P^T U)^{-T} U^T c`` it is the
    hyper-reduced one.  Only ``A[stencil[rows]]`` is stored, so every
    evaluation costs ``O(len(rows) * s * 2k)``.
    """

    def __init__(self, model, A, rows, weights):
        self.model = model
        self.rows = np.asarray(rows, dtype=np.intp)
        self.weights = np.asarray(weights, dtype=float)
        self.A_rows = np.ascontiguousarray(A[model.stencil[self.rows]])  # (r, s, 2k)

    def __len__(self):
        return self.rows.size

    def local_values(self, z):
        return self.A_rows @ z

    def value(self, z, eta, counters=None):
        if counters is not None:
            counters.g_rows += self.rows.size
        return float(self.weights @ self.model.G_local(self.local_values(z), self.rows, _param(eta)))

    def gradient(self, z, eta, counters=None):
        if counters is not None:
            counters.jac_rows += self.rows.size
        Jl = self.model.jac_local(self.local_values(z), self.rows, _param(eta))
        return np.einsum("r,rs,rsk->k", self.weights, Jl, self.A_rows, optimize=True)

    def hessian(self, z, eta, counters=None):
        if counters is not None:
            counters.hess_rows += self.rows.size
        Hl = self.model.hess_local(self.local_values(z), self.rows, _param(eta)) * self.weights[:, None, None]
        T = np.einsum("rst,rtk->rsk", Hl, self.A_rows, optimize=True)
        return np.einsum("rsa,rsk->ak", self.A_rows, T, optimize=True)

    def reduced_jacobian(self, z, eta):
        """Rows ``self.rows`` of ``J_G(A z) A``; shape ``(r, 2k)``."""
        Jl = self.model.jac_local(self.local_values(z), self.rows, _param(eta))
        return np.einsum("rs,rsk->rk", Jl, self.A_rows, optimize=True)


class ReducedModel:
    """Symplectic Galerkin projection of a full model onto ``col(A)``.

    ``L_r = A^T L A`` and ``f_r = A^T f`` are cached per parameter.
    """

    def __init__(self, model, basis):
        self.model = model
        self.basis = basis if isinstance(basis, SymplecticBasis) else SymplecticBasis(np.asarray(basis), "given")
        self.A = self.basis.A
        if self.A.shape[0] != model.N:
            raise ValueError(f"basis has {self.A.shape[0]} rows, model has N={model.N}")
        self._ops = {}
        self.nonlinear = ProjectedNonlinearity(model, self.A, np.arange(model.d), model.c)

    @property
    def dim(self):
        return self.A.shape[1]

    def operators(self, eta):
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        key = tuple(eta)
        ops = self._ops.get(key)
        if ops is None:
            L = self.model.quadratic(eta)
            Lr = self.A.T @ (L @ self.A)
            Lr = 0.5 * (Lr + Lr.T)
            fr = self.A.T @ self.model.linear(eta)
            ops = (Lr, fr, self.model.constant(eta))
            self._ops[key] = ops
        return ops

    def quadratic_part(self, z, eta):
        Lr, fr, g0 = self.operators(eta)
        return 0.5 * z @ Lr @ z + z @ fr + g0

    def hamiltonian(self, z, eta, counters=None):
        return float(self.quadratic_part(z, eta) + self.nonlinear.value(z, eta, counters))

    def gradient(self, z, eta, counters=None):
        Lr, fr, _ = self.operators(eta)
        return Lr @ z + fr + self.nonlinear.gradient(z, eta, counters)

    def hessian(self, z, eta, counters=None):
        Lr, _, _ = self.operators(eta)
        return Lr + self.nonlinear.hessian(z, eta, counters)

    def rhs(self, z, eta, counters=None):
        return poisson_apply(self.gradient(z, eta, counters))

    def system(self, counters=None):
        from .integrate import OdeSystem

        return OdeSystem(
            self.dim,
            lambda z, eta: self.gradient(z, eta, counters),
            lambda z, eta: self.hessian(z, eta, counters),
            lambda z, eta: self.hamiltonian(z, eta),
            sparse=False,
        )


def assemble_rom(model, A, certify=True):
    basis = A if isinstance(A, SymplecticBasis) else SymplecticBasis(np.ascontiguousarray(A), "given")
    if certify:
        basis.certify()
    return ReducedModel(model, basis)
