"""Full-order Hamiltonian models.

A model describes the canonical Hamiltonian system ``y' = J grad H(y)`` with

    H(y, eta) = 1/2 y^T L(eta) y + y^T f(eta) + g0(eta) + c^T G(y, eta),

where every entry ``G_i`` depends on a short, fixed list of state entries (the
row stencil).  All nonlinear evaluations go through local kernels that only
see the stencil values of the requested rows, so that a caller that needs
``m`` rows never pays for the other ``d - m``.

State layout is ``(q_1..q_n, p_1..p_n)``.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.sparse as sp

__all__ = [
    "HamiltonianModel",
    "ShallowWater2D",
    "NonlinearSchroedinger1D",
    "ShiftedModel",
    "poisson_apply",
    "shift_model",
    "build_swe2d",
    "build_nls1d",
    "periodic_first_derivative",
    "periodic_second_derivative",
]


def poisson_apply(v):
    """Apply the canonical Poisson tensor ``J = [[0, I], [-I, 0]]``.

    Works on vectors and on the rows of dense or sparse matrices.  Never
    materializes ``J``.
    """
    n2 = v.shape[0]
    if n2 % 2:
        raise ValueError(f"leading dimension must be even, got {n2}")
    n = n2 // 2
    if sp.issparse(v):
        v = v.tocsr()
        return sp.vstack([v[n:], -v[:n]]).tocsr()
    return np.concatenate([v[n:], -v[:n]])


def periodic_first_derivative(npts, h):
    """Centered second-order first derivative on a periodic 1D grid."""
    off = np.full(npts - 1, 1.0 / (2.0 * h))
    D = sp.diags([off, -off], [1, -1], shape=(npts, npts), format="lil")
    D[0, npts - 1] = -1.0 / (2.0 * h)
    D[npts - 1, 0] = 1.0 / (2.0 * h)
    return D.tocsr()


def periodic_second_derivative(npts, h):
    """Centered second-order second derivative on a periodic 1D grid."""
    inv = 1.0 / h**2
    D = sp.diags(
        [np.full(npts - 1, inv), np.full(npts, -2.0 * inv), np.full(npts - 1, inv)],
        [-1, 0, 1],
        shape=(npts, npts),
        format="lil",
    )
    D[0, npts - 1] += inv
    D[npts - 1, 0] += inv
    return D.tocsr()


def _as_param(eta):
    return np.atleast_1d(np.asarray(eta, dtype=float))


class HamiltonianModel:
    """Base class for a full-order model with a sparse decomposition ``c^T G``.

    Subclasses provide the linear/quadratic parts and three local kernels
    operating on stencil values ``vals`` of shape ``(r, s)`` for rows ``rows``:

    * ``G_local``    -> ``(r,)``
    * ``jac_local``  -> ``(r, s)``  (derivative of ``G_i`` w.r.t. its stencil entries)
    * ``hess_local`` -> ``(r, s, s)``

    Attributes
    ----------
    n : int
        Half phase-space dimension.
    stencil : ndarray of int, shape (d, s)
        Column indices (into the state) that row ``i`` of ``G`` depends on.
    s1, s2 : int
        Maximum number of stencil entries among the first / last ``n`` state
        components.
    c : ndarray, shape (d,)
        Decomposition weights.
    param_box : ndarray, shape (p, 2)
        Lower/upper bounds of the parameter domain.
    """

    name = "model"

    def __init__(self, n, stencil, s1, s2, param_box, c=None):
        self.n = int(n)
        self.stencil = np.ascontiguousarray(stencil, dtype=np.intp)
        self.stencil.setflags(write=False)
        self.s1 = int(s1)
        self.s2 = int(s2)
        self.param_box = np.atleast_2d(np.asarray(param_box, dtype=float))
        d = self.stencil.shape[0]
        self.c = np.ones(d) if c is None else np.asarray(c, dtype=float)
        self.c.setflags(write=False)

    # -- sizes -----------------------------------------------------------
    @property
    def N(self):
        return 2 * self.n

    @property
    def d(self):
        return self.stencil.shape[0]

    @property
    def sparsity(self):
        """Per-row column index lists of the Jacobian of ``G``."""
        return [list(row) for row in self.stencil]

    # -- hooks -------------------------------------------------------------
    def quadratic(self, eta):
        raise NotImplementedError

    def linear(self, eta):
        return np.zeros(self.N)

    def constant(self, eta):
        return 0.0

    def initial_state(self, eta):
        raise NotImplementedError

    def G_local(self, vals, rows, eta):
        raise NotImplementedError

    def jac_local(self, vals, rows, eta):
        raise NotImplementedError

    def hess_local(self, vals, rows, eta):
        raise NotImplementedError

    # -- checks ------------------------------------------------------------
    def check_param(self, eta):
        eta = _as_param(eta)
        box = self.param_box
        if eta.shape[0] != box.shape[0]:
            raise ValueError(f"expected {box.shape[0]} parameters, got {eta.shape[0]}")
        if np.any(eta < box[:, 0]) or np.any(eta > box[:, 1]):
            warnings.warn(f"parameter {eta} outside the parameter box", stacklevel=3)
        return eta

    def _check_state(self, y):
        y = np.asarray(y)
        if y.ndim != 1 or y.shape[0] != self.N:
            raise ValueError(f"state must have length {self.N}, got shape {y.shape}")
        return y

    def _rows(self, rows):
        if rows is None:
            return np.arange(self.d)
        rows = np.asarray(rows, dtype=np.intp).ravel()
        if rows.size and (rows.min() < 0 or rows.max() >= self.d):
            raise IndexError(f"row index out of range [0, {self.d})")
        return rows

    # -- evaluation ----------------------------------------------------------
    def stencil_values(self, y, rows):
        """Gather the stencil entries of ``y`` for ``rows``; shape ``(r, s)``."""
        return y[self.stencil[rows]]

    def G(self, y, eta, rows=None):
        """Entries ``rows`` of the decomposition vector (all when omitted)."""
        y = self._check_state(y)
        rows = self._rows(rows)
        return self.G_local(self.stencil_values(y, rows), rows, _as_param(eta))

    def jac_rows(self, y, eta, rows=None):
        """Rows of the Jacobian of ``G`` as a CSR matrix of shape ``(r, N)``."""
        y = self._check_state(y)
        rows = self._rows(rows)
        vals = self.jac_local(self.stencil_values(y, rows), rows, _as_param(eta))
        r, s = vals.shape
        indptr = np.arange(0, r * s + 1, s)
        J = sp.csr_matrix((vals.ravel(), self.stencil[rows].ravel(), indptr), shape=(r, self.N))
        J.sum_duplicates()
        return J

    def hamiltonian(self, y, eta):
        y = self._check_state(y)
        eta = self.check_param(eta)
        quad = 0.5 * y @ (self.quadratic(eta) @ y)
        return float(quad + y @ self.linear(eta) + self.constant(eta) + self.c @ self.G(y, eta))

    def nonlinear_gradient(self, y, eta):
        """``J_G(y)^T c`` assembled from the stencil rows."""
        rows = np.arange(self.d)
        vals = self.jac_local(self.stencil_values(y, rows), rows, _as_param(eta))
        vals = vals * self.c[:, None]
        return np.bincount(self.stencil.ravel(), weights=vals.ravel(), minlength=self.N)

    def gradient(self, y, eta):
        y = self._check_state(y)
        eta = self.check_param(eta)
        return self.quadratic(eta) @ y + self.linear(eta) + self.nonlinear_gradient(y, eta)

    def hessian(self, y, eta):
        """Sparse Hessian ``L + sum_i c_i grad^2 G_i(y)``."""
        y = self._check_state(y)
        eta = self.check_param(eta)
        rows = np.arange(self.d)
        H = self.hess_local(self.stencil_values(y, rows), rows, eta) * self.c[:, None, None]
        st = self.stencil
        s = st.shape[1]
        I = np.broadcast_to(st[:, :, None], (self.d, s, s)).ravel()
        K = np.broadcast_to(st[:, None, :], (self.d, s, s)).ravel()
        Hn = sp.csr_matrix((H.ravel(), (I, K)), shape=(self.N, self.N))
        return (self.quadratic(eta) + Hn).tocsr()


class ShallowWater2D(HamiltonianModel):
    """Periodic 2D shallow water equations, state ``(chi, Phi)``.

    Parameters are ``eta = (beta, gamma)``; ``beta`` only enters the initial
    condition.  ``G_i = gamma/2 chi_i [(D1 Phi)_i^2 + (D2 Phi)_i^2]``.
    """

    name = "swe2d"

    def __init__(self, Lx1=2.0, Lx2=2.0, nx1=50, nx2=50, param_box=((1.1, 1.7), (0.7, 1.3))):
        if nx1 < 3 or nx2 < 3:
            raise ValueError("grid needs at least 3 points per direction")
        if Lx1 <= 0 or Lx2 <= 0:
            raise ValueError("domain half-widths must be positive")
        self.Lx1, self.Lx2 = float(Lx1), float(Lx2)
        self.nx1, self.nx2 = int(nx1), int(nx2)
        self.dx1 = 2.0 * self.Lx1 / self.nx1
        self.dx2 = 2.0 * self.Lx2 / self.nx2
        n = self.nx1 * self.nx2
        i, j = np.meshgrid(np.arange(self.nx1), np.arange(self.nx2), indexing="xy")
        i, j = i.ravel(), j.ravel()  # x1 fastest
        east = (i + 1) % self.nx1 + self.nx1 * j
        west = (i - 1) % self.nx1 + self.nx1 * j
        north = i + self.nx1 * ((j + 1) % self.nx2)
        south = i + self.nx1 * ((j - 1) % self.nx2)
        stencil = np.column_stack([np.arange(n), n + east, n + west, n + north, n + south])
        super().__init__(n, stencil, 1, 4, param_box)
        self.x1 = -self.Lx1 + i * self.dx1
        self.x2 = -self.Lx2 + j * self.dx2
        I1 = sp.identity(self.nx1, format="csr")
        I2 = sp.identity(self.nx2, format="csr")
        self.D1 = sp.kron(I2, periodic_first_derivative(self.nx1, self.dx1), format="csr")
        self.D2 = sp.kron(periodic_first_derivative(self.nx2, self.dx2), I1, format="csr")
        self._L_cache = {}

    def quadratic(self, eta):
        gamma = float(_as_param(eta)[1])
        L = self._L_cache.get(gamma)
        if L is None:
            diag = np.concatenate([np.full(self.n, gamma), np.zeros(self.n)])
            L = self._L_cache[gamma] = sp.diags(diag, format="csr")
        return L

    def initial_state(self, eta):
        beta = _as_param(eta)[0]
        chi = 1.0 + 0.5 * np.exp(-beta * (self.x1**2 + self.x2**2))
        return np.concatenate([chi, np.zeros(self.n)])

    def _grads(self, vals):
        a = (vals[:, 1] - vals[:, 2]) / (2.0 * self.dx1)
        b = (vals[:, 3] - vals[:, 4]) / (2.0 * self.dx2)
        return a, b

    def G_local(self, vals, rows, eta):
        gamma = eta[1]
        a, b = self._grads(vals)
        return 0.5 * gamma * vals[:, 0] * (a**2 + b**2)

    def jac_local(self, vals, rows, eta):
        gamma = eta[1]
        chi = vals[:, 0]
        a, b = self._grads(vals)
        ga = gamma * chi * a / (2.0 * self.dx1)
        gb = gamma * chi * b / (2.0 * self.dx2)
        return np.column_stack([0.5 * gamma * (a**2 + b**2), ga, -ga, gb, -gb])

    def hess_local(self, vals, rows, eta):
        gamma = eta[1]
        chi = vals[:, 0]
        a, b = self._grads(vals)
        h1 = 1.0 / (2.0 * self.dx1)
        h2 = 1.0 / (2.0 * self.dx2)
        dphi = np.array([[h1, 0.0], [-h1, 0.0], [0.0, h2], [0.0, -h2]])  # d(a,b)/d(stencil Phi)
        H = np.zeros((vals.shape[0], 5, 5))
        cross = gamma * (a[:, None] * dphi[None, :, 0] + b[:, None] * dphi[None, :, 1])
        H[:, 0, 1:] = cross
        H[:, 1:, 0] = cross
        H[:, 1:, 1:] = gamma * chi[:, None, None] * (dphi @ dphi.T)[None]
        return H


class NonlinearSchroedinger1D(HamiltonianModel):
    """Periodic 1D cubic NLS, ``u = q + i p``, parameter ``eta = (epsilon,)``.

    ``L = blockdiag(-Dxx, -Dxx)`` and ``G_i = -(eps/4) (q_i^2 + p_i^2)^2``.
    """

    name = "nls1d"

    def __init__(self, l=0.11, n=2048, param_box=((0.9, 1.1),)):
        if n < 3:
            raise ValueError("need at least 3 grid points")
        if l <= 0:
            raise ValueError("l must be positive")
        self.l = float(l)
        self.Lx = np.pi / self.l
        self.dx = 2.0 * self.Lx / n
        self.x = -self.Lx + np.arange(n) * self.dx
        stencil = np.column_stack([np.arange(n), n + np.arange(n)])
        super().__init__(n, stencil, 1, 1, param_box)
        self.Dxx = periodic_second_derivative(n, self.dx)
        self._L = sp.block_diag([-self.Dxx, -self.Dxx], format="csr")

    def quadratic(self, eta):
        return self._L

    def initial_state(self, eta):
        amp = np.sqrt(2.0) / np.cosh(self.x)
        return np.concatenate([amp * np.cos(self.x / 2), amp * np.sin(self.x / 2)])

    def G_local(self, vals, rows, eta):
        rho = vals[:, 0] ** 2 + vals[:, 1] ** 2
        return -0.25 * eta[0] * rho**2

    def jac_local(self, vals, rows, eta):
        rho = vals[:, 0] ** 2 + vals[:, 1] ** 2
        return -eta[0] * rho[:, None] * vals

    def hess_local(self, vals, rows, eta):
        q, p = vals[:, 0], vals[:, 1]
        H = np.empty((vals.shape[0], 2, 2))
        H[:, 0, 0] = 3 * q**2 + p**2
        H[:, 1, 1] = q**2 + 3 * p**2
        H[:, 0, 1] = H[:, 1, 0] = 2 * q * p
        return -eta[0] * H


class ShiftedModel(HamiltonianModel):
    """Model in the variable ``y_s = y - y0`` with ``G_s(y_s) = G(y_s + y0) - G(y0)``.

    The Hamiltonian value is unchanged, ``H_s(y_s) = H(y_s + y0)``, and the
    shifted initial condition is zero.  ``y0`` is either a fixed state or a
    callable ``eta -> state``; by default it is the base model's initial
    condition, which for SWE depends on the parameter.
    """

    def __init__(self, base, y0=None):
        self.base = base
        if y0 is None:
            y0 = base.initial_state
        if callable(y0):
            self._y0_fn = y0
        else:
            fixed = self._validated(y0, base.N)
            self._y0_fn = lambda eta: fixed
        super().__init__(base.n, base.stencil, base.s1, base.s2, base.param_box, base.c)
        self.name = base.name
        self._cache = {}

    @staticmethod
    def _validated(y0, N):
        y0 = np.array(y0, dtype=float)
        if y0.shape != (N,):
            raise ValueError(f"shift must have length {N}")
        if not np.all(np.isfinite(y0)):
            raise ValueError("shift must be finite")
        y0.setflags(write=False)
        return y0

    def __getattr__(self, attr):
        # grid metadata (x, dx, D1, ...) of the wrapped model
        if attr in ("base", "_cache", "_y0_fn"):
            raise AttributeError(attr)
        return getattr(self.base, attr)

    def _shift(self, eta):
        eta = _as_param(eta)
        key = tuple(eta)
        if key not in self._cache:
            y0 = self._validated(self._y0_fn(eta), self.N)
            self._cache[key] = (y0, self.base.G(y0, eta))
        return self._cache[key]

    def shift_state(self, eta):
        """The state ``y0(eta)`` that is mapped to the origin."""
        return self._shift(eta)[0]

    def unshift(self, y_s, eta):
        return np.asarray(y_s) + self.shift_state(eta)

    def quadratic(self, eta):
        return self.base.quadratic(eta)

    def linear(self, eta):
        y0 = self.shift_state(eta)
        return self.base.linear(eta) + self.base.quadratic(eta) @ y0

    def constant(self, eta):
        eta = _as_param(eta)
        y0, g_y0 = self._shift(eta)
        return float(
            self.base.constant(eta)
            + 0.5 * y0 @ (self.base.quadratic(eta) @ y0)
            + y0 @ self.base.linear(eta)
            + self.base.c @ g_y0
        )

    def initial_state(self, eta):
        return np.zeros(self.N)

    def G_local(self, vals, rows, eta):
        y0, g_y0 = self._shift(eta)
        return self.base.G_local(vals + y0[self.stencil[rows]], rows, eta) - g_y0[rows]

    def jac_local(self, vals, rows, eta):
        y0 = self.shift_state(eta)
        return self.base.jac_local(vals + y0[self.stencil[rows]], rows, eta)

    def hess_local(self, vals, rows, eta):
        y0 = self.shift_state(eta)
        return self.base.hess_local(vals + y0[self.stencil[rows]], rows, eta)


def shift_model(model, y0=None):
    """Shift ``model`` so that ``y0`` (default: its initial condition) becomes the origin."""
    return ShiftedModel(model, y0)


def build_swe2d(config=None):
    """Build the 2D shallow water model from a config mapping."""
    cfg = dict(config or {})
    box = cfg.get("param_box", ((1.1, 1.7), (0.7, 1.3)))
    return ShallowWater2D(
        Lx1=cfg.get("Lx1", cfg.get("L", 2.0)),
        Lx2=cfg.get("Lx2", cfg.get("L", 2.0)),
        nx1=int(cfg.get("nx1", cfg.get("nx", 50))),
        nx2=int(cfg.get("nx2", cfg.get("nx", 50))),
        param_box=box,
    )


def build_nls1d(config=None):
    """Build the 1D NLS model from a config mapping."""
    cfg = dict(config or {})
    n = int(cfg.get("n", 2048))
    if n <= 0:
        raise ValueError("n must be positive")
    return NonlinearSchroedinger1D(l=cfg.get("l", 0.11), n=n, param_box=cfg.get("param_box", ((0.9, 1.1),)))
