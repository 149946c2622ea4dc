"""Implicit midpoint and average-vector-field time stepping.

Both schemes only need the Hamiltonian gradient (and optionally its
Hessian for the Newton Jacobian), so the same code drives the full, reduced
and hyper-reduced systems.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import poisson_apply

__all__ = [
    "NewtonConfig",
    "NewtonError",
    "IntegrationError",
    "QuadratureRule",
    "OdeSystem",
    "Trajectory",
    "newton_solve",
    "step_imr",
    "step_avf",
    "integrate_trajectory",
]


class NewtonError(RuntimeError):
    """Newton iteration did not reach the residual tolerance."""

    def __init__(self, residual, iterations):
        super().__init__(f"Newton failed after {iterations} iterations, residual {residual:.3e}")
        self.residual = residual
        self.iterations = iterations


class IntegrationError(RuntimeError):
    def __init__(self, step, cause):
        super().__init__(f"time step {step} failed: {cause}")
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-10
    max_iter: int = 30
    jacobian: str = "analytic"

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("Newton tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.jacobian not in ("analytic", "fd"):
            raise ValueError(f"unknown jacobian mode {self.jacobian!r}")


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature on [0, 1] for the AVF line integral."""

    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def gauss_legendre(cls, npts=3):
        x, w = np.polynomial.legendre.leggauss(int(npts))
        return cls(0.5 * (x + 1.0), 0.5 * w)

    @property
    def degree(self):
        """Highest polynomial degree integrated exactly (Gauss rule)."""
        return 2 * len(self.nodes) - 1


@dataclass(frozen=True)
class OdeSystem:
    """Canonical Hamiltonian system ``y' = J grad H(y, eta)``.

    ``hessian`` may return a dense array or a sparse matrix; ``sparse``
    selects the linear solver used inside Newton.
    """

    dim: int
    gradient: Callable
    hessian: Optional[Callable] = None
    hamiltonian: Optional[Callable] = None
    sparse: bool = False

    def rhs(self, y, eta):
        return poisson_apply(self.gradient(y, eta))

    @classmethod
    def from_model(cls, model):
        return cls(model.N, model.gradient, model.hessian, model.hamiltonian, sparse=True)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n_steps + 1, dim)

    def __len__(self):
        return self.states.shape[0]

    @property
    def final(self):
        return self.states[-1]


def _identity(dim, sparse):
    return sp.identity(dim, format="csc") if sparse else np.eye(dim)


def _solve(Jm, F):
    if sp.issparse(Jm):
        return spla.spsolve(Jm.tocsc(), F)
    return la.solve(Jm, F, check_finite=False)


def _fd_jacobian(residual, x, eps=1e-7):
    F0 = residual(x)
    Jm = np.empty((F0.size, x.size))
    for i in range(x.size):
        h = eps * max(1.0, abs(x[i]))
        xp = x.copy()
        xp[i] += h
        Jm[:, i] = (residual(xp) - F0) / h
    return Jm


def newton_solve(residual, jacobian, x0, newton, counters=None):
    """Solve ``residual(x) = 0`` starting from ``x0``."""
    x = np.array(x0, dtype=float)
    for it in range(newton.max_iter + 1):
        F = residual(x)
        res = np.linalg.norm(F)
        if not np.isfinite(res):
            raise NewtonError(res, it)
        if res <= newton.tol:
            if counters is not None:
                counters.newton_iterations += it
            return x
        if it == newton.max_iter:
            break
        Jm = _fd_jacobian(residual, x) if jacobian is None or newton.jacobian == "fd" else jacobian(x)
        x = x - _solve(Jm, F)
    raise NewtonError(res, newton.max_iter)


def step_imr(system, y, eta, dt, newton=NewtonConfig(), counters=None):
    """One implicit midpoint step ``y+ = y + dt J grad H((y + y+)/2)``."""
    if dt < 0:
        raise ValueError("time step must be non-negative")
    y = np.asarray(y, dtype=float)
    eye = _identity(system.dim, system.sparse)

    def residual(x):
        return x - y - dt * poisson_apply(system.gradient(0.5 * (x + y), eta))

    def jac(x):
        return eye - 0.5 * dt * poisson_apply(system.hessian(0.5 * (x + y), eta))

    return newton_solve(residual, jac if system.hessian is not None else None, y, newton, counters)


def step_avf(system, y, eta, dt, newton=NewtonConfig(), quadrature=None, counters=None):
    """One AVF step ``(y+ - y)/dt = J int_0^1 grad H(xi y+ + (1 - xi) y) dxi``."""
    if dt < 0:
        raise ValueError("time step must be non-negative")
    quad = quadrature or QuadratureRule.gauss_legendre(3)
    y = np.asarray(y, dtype=float)
    eye = _identity(system.dim, system.sparse)

    def residual(x):
        g = sum(w * system.gradient(xi * x + (1.0 - xi) * y, eta) for xi, w in zip(quad.nodes, quad.weights))
        return x - y - dt * poisson_apply(g)

    def jac(x):
        H = sum(w * xi * system.hessian(xi * x + (1.0 - xi) * y, eta) for xi, w in zip(quad.nodes, quad.weights))
        return eye - dt * poisson_apply(H)

    return newton_solve(residual, jac if system.hessian is not None else None, y, newton, counters)


def integrate_trajectory(
    system,
    y0,
    eta,
    dt,
    n_steps,
    scheme="avf",
    newton=NewtonConfig(),
    quadrature=None,
    callbacks=(),
    counters=None,
):
    """Integrate ``n_steps`` steps and return all states ``t^0 .. t^n``.

    Each callback is called as ``cb(step_index, state)`` after the state is
    stored, including once for the initial state.
    """
    scheme = scheme.lower()
    if scheme not in ("imr", "avf"):
        raise ValueError(f"unknown scheme {scheme!r}")
    states = np.empty((n_steps + 1, system.dim))
    states[0] = y0
    for cb in callbacks:
        cb(0, states[0])
    for k in range(n_steps):
        try:
            if scheme == "imr":
                states[k + 1] = step_imr(system, states[k], eta, dt, newton, counters)
            else:
                states[k + 1] = step_avf(system, states[k], eta, dt, newton, quadrature, counters)
        except (NewtonError, np.linalg.LinAlgError, ValueError) as exc:
            raise IntegrationError(k + 1, exc) from exc
        for cb in callbacks:
            cb(k + 1, states[k + 1])
    return Trajectory(np.arange(n_steps + 1) * dt, states)
