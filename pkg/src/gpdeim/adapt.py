"""Online adaptation of the DEIM pair (GP-ADEIM).

Every ``delta`` steps after a warm-up of ``delta0`` steps the DEIM basis is
corrected by a rank-``r`` matrix that only touches the rows in the sampling
set ``S``.  The correction minimizes the sampled residual of the DEIM
reconstruction of the reduced-Jacobian snapshots in a short window of past
hyper-reduced states.  Every ``gamma`` steps the sampling set itself is
re-chosen from the full residual.
"""

from __future__ import annotations

import time
import warnings
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg as la

from .deim import (
    DeimProjector,
    HyperReducedModel,
    SingularInterpolationError,
    build_projector,
    collect_jacobian_snapshots,
    deim_indices_greedy,
    pod_basis,
)
from .integrate import NewtonConfig, OdeSystem, Trajectory, integrate_trajectory, step_avf, step_imr
from .metrics import RunReport
from .reduce import ProjectedNonlinearity

__all__ = [
    "AdaptConfig",
    "WindowBuffer",
    "WindowSnapshots",
    "SamplingSet",
    "RankUpdate",
    "UpdateContext",
    "compute_window_residual",
    "solve_rank_r_update",
    "adapt_basis",
    "adapt_sampling",
    "initial_projector_from_states",
    "gp_adeim_run",
]

#: above this condition number of C C^T the QR path replaces the Cholesky path
CHOL_COND_LIMIT = 1e12
#: condition estimate of P^T U above which a warning is emitted
PTU_COND_WARN = 1e8

SAMPLING_STRATEGIES = ("projection", "residual", "random")


@dataclass(frozen=True)
class AdaptConfig:
    """Hyper-parameters of the adaptive scheme.

    Exactly one of ``rank`` (fixed update rank) and ``rank_tol`` (relative
    tolerance on the singular values of ``S^T R C^T``) is used; ``rank`` wins
    when both are set.  The same holds for ``m_s`` and ``sample_tol``
    (absolute tolerance on the row norms of ``R C``, floored at ``m`` rows).
    """

    m: int
    delta0: int = 5
    delta: int = 5
    w: int = 1
    gamma: int = 5
    rank: Optional[int] = None
    rank_tol: Optional[float] = 1e-12
    m_s: Optional[int] = None
    sample_tol: Optional[float] = 1e-10
    sampling: str = "projection"
    init: str = "warmup"

    def __post_init__(self):
        errs = []
        if self.m < 1:
            errs.append("m must be >= 1")
        for name in ("delta0", "delta", "gamma", "w"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        if self.w >= self.delta0:
            errs.append(f"w ({self.w}) must be smaller than delta0 ({self.delta0})")
        if self.delta >= 1 and self.gamma % self.delta:
            errs.append(f"gamma ({self.gamma}) must be a multiple of delta ({self.delta})")
        if self.rank is None and self.rank_tol is None:
            errs.append("one of rank and rank_tol is required")
        if self.rank is not None and self.rank < 0:
            errs.append("rank must be >= 0")
        if self.rank_tol is not None and self.rank_tol < 0:
            errs.append("rank_tol must be >= 0")
        if self.m_s is None and self.sample_tol is None:
            errs.append("one of m_s and sample_tol is required")
        if self.m_s is not None and self.m_s < self.m:
            errs.append(f"m_s ({self.m_s}) must be >= m ({self.m})")
        if self.sampling not in SAMPLING_STRATEGIES:
            errs.append(f"sampling must be one of {SAMPLING_STRATEGIES}")
        if self.init not in ("warmup", "training"):
            errs.append("init must be 'warmup' or 'training'")
        if errs:
            raise ValueError("; ".join(errs))


class WindowBuffer:
    """Ring buffer with the last ``w`` hyper-reduced states."""

    def __init__(self, w):
        if w < 1:
            raise ValueError("window length must be >= 1")
        self.w = w
        self._buf = deque(maxlen=w)

    def push(self, z):
        self._buf.append(np.array(z, dtype=float))

    def __len__(self):
        return len(self._buf)

    @property
    def full(self):
        return len(self._buf) == self.w

    def states(self):
        return np.array(self._buf)

    def snapshots(self, model, A, eta, counters=None):
        if not self.full:
            raise ValueError(f"window holds {len(self)} of {self.w} states")
        return WindowSnapshots(model, A, self.states(), eta, counters)


class WindowSnapshots:
    """Lazy ``F = [J_G(A z_1) A, ..., J_G(A z_w) A]`` evaluated by rows.

    Only the requested rows of the Jacobian are formed; the counter records
    how many rows were touched.
    """

    def __init__(self, model, A, states, eta, counters=None):
        self.model = model
        self.A = np.asarray(getattr(A, "A", A))
        self.states = np.atleast_2d(states)
        self.eta = np.atleast_1d(np.asarray(eta, dtype=float))
        self.counters = counters
        self.rows_touched = 0

    @property
    def shape(self):
        return (self.model.d, self.A.shape[1] * self.states.shape[0])

    def rows(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        proj = ProjectedNonlinearity(self.model, self.A, idx, np.ones(idx.size))
        blocks = [proj.reduced_jacobian(z, self.eta) for z in self.states]
        touched = idx.size * len(self.states)
        self.rows_touched += touched
        if self.counters is not None:
            self.counters.jac_rows += touched
        return np.hstack(blocks)

    def full(self):
        return self.rows(np.arange(self.model.d))


def _rows_of(F, idx):
    return F.rows(idx) if hasattr(F, "rows") else np.asarray(F)[idx]


def compute_window_residual(projector, F, rows=None):
    """DEIM coefficients ``C`` and residual rows ``R[rows]`` for snapshots ``F``.

    ``C = (P^T U)^{-1} P^T F`` and ``R = U C - F``.  ``F`` is a dense
    ``d x wbar`` array or a :class:`WindowSnapshots`; with ``rows=None`` the
    full residual is returned.
    """
    C = projector.coefficients(_rows_of(F, projector.beta))
    rows = np.arange(projector.d) if rows is None else np.asarray(rows, dtype=np.intp)
    R = projector.U[rows] @ C - _rows_of(F, rows)
    return C, R


@dataclass
class RankUpdate:
    """Rank-``r`` correction ``a b^T`` with generalized eigenvalues ``lam``."""

    a: np.ndarray
    b: np.ndarray
    lam: np.ndarray
    path: str = "cholesky"

    @property
    def rank(self):
        return self.b.shape[1]


def _select_rank(sigma, rank, rank_tol, shape):
    """Number of directions kept; never more than the numerical rank."""
    if sigma.size == 0 or sigma[0] == 0.0:
        return 0
    numerical = int(np.count_nonzero(sigma > max(shape) * np.finfo(float).eps * sigma[0]))
    if rank is not None:
        return min(int(rank), numerical)
    return min(int(np.count_nonzero(sigma > rank_tol * sigma[0])), numerical)


def solve_rank_r_update(StR, C, rank=None, rank_tol=None):
    """Minimize ``||S^T R + a b^T C||_F`` over rank-``r`` pairs ``(a, b)``.

    The generalized eigenproblem ``C (S^T R)^T (S^T R) C^T b = lam C C^T b``
    is reduced to the SVD of ``M = S^T R C^T L^{-T}`` with ``C C^T = L L^T``.
    If ``C`` is (numerically) row-rank deficient, a column-pivoted QR of ``C``
    restricts the problem to its row space.  The rank is fixed (``rank``) or
    chosen from the singular values of ``S^T R C^T`` relative to the largest
    (``rank_tol``); with neither, the full numerical rank is used.
    """
    StR = np.atleast_2d(np.asarray(StR, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    m_s, m = StR.shape[0], C.shape[0]
    if StR.shape[1] != C.shape[1]:
        raise ValueError(f"S^T R has {StR.shape[1]} columns, C has {C.shape[1]}")
    empty = RankUpdate(np.zeros((m_s, 0)), np.zeros((m, 0)), np.zeros(0), "none")
    StRCt = StR @ C.T
    sig_rc = la.svdvals(StRCt) if StRCt.size else np.zeros(0)
    r = _select_rank(sig_rc, rank, 0.0 if rank_tol is None else rank_tol, StRCt.shape)
    if r == 0:
        return empty

    CCt = C @ C.T
    path = "cholesky"
    try:
        if np.linalg.cond(CCt) > CHOL_COND_LIMIT:
            raise np.linalg.LinAlgError("ill-conditioned C C^T")
        Lc = la.cholesky(CCt, lower=True)
        M = la.solve_triangular(Lc, StRCt.T, lower=True).T  # S^T R C^T L^{-T}
        P_, s, Vt = la.svd(M, full_matrices=False)
        back = lambda V: la.solve_triangular(Lc, V, lower=True, trans="T")  # noqa: E731
    except np.linalg.LinAlgError:
        path = "qr"
        Q, Rq, piv = la.qr(C, mode="economic", pivoting=True)
        diag = np.abs(np.diag(Rq))
        r_c = int(np.count_nonzero(diag > max(C.shape) * np.finfo(float).eps * diag[0])) if diag.size else 0
        if r_c == 0:
            return empty
        Z = np.empty((r_c, C.shape[1]))
        Z[:, piv] = Rq[:r_c]
        Q2, R2 = la.qr(Z.T, mode="economic")
        M = StR @ Q2
        P_, s, Vt = la.svd(M, full_matrices=False)
        Qr = Q[:, :r_c]
        back = lambda V: Qr @ la.solve_triangular(R2, V)  # noqa: E731
        r = min(r, r_c)

    r = min(r, int(np.count_nonzero(s > max(M.shape) * np.finfo(float).eps * s[0])))
    if r == 0:
        return empty
    Vr = Vt[:r].T
    b = back(Vr)
    a = -(P_[:, :r] * s[:r])  # a_i = -M v_i since ||C^T b_i|| = 1
    return RankUpdate(a, b, s[:r] ** 2, path)


@dataclass
class SamplingSet:
    indices: np.ndarray
    d: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.intp)
        if len(set(self.indices.tolist())) != self.indices.size:
            raise ValueError("sampling indices must be distinct")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.d):
            raise IndexError("sampling index out of range")
        if self.indices.size > self.d / 2:
            warnings.warn(f"{self.indices.size} sampling rows out of d={self.d}", RuntimeWarning, stacklevel=2)

    @property
    def m_s(self):
        return self.indices.size

    def complement(self):
        mask = np.ones(self.d, dtype=bool)
        mask[self.indices] = False
        return np.flatnonzero(mask)


def _row_space(C):
    """Orthonormal basis ``V`` of the row space of ``C`` (so ``CC = V V^T``)."""
    _, s, Vt = la.svd(C, full_matrices=False)
    rank = int(np.count_nonzero(s > max(C.shape) * np.finfo(float).eps * s[0])) if s.size and s[0] > 0 else 0
    return Vt[:rank].T


def _top_rows(norms, count):
    order = np.argsort(-norms, kind="stable")
    return np.sort(order[:count])


def adapt_sampling(projector, F, m_s=None, tol=None, strategy="projection", rng=None, C=None, R=None):
    """New sampling rows: the ``m_s`` largest rows of ``R CC`` (``CC = C^T (C C^T)^+ C``).

    With ``tol`` the rows whose norm exceeds ``tol`` are kept, at least ``m``
    of them.  ``strategy='residual'`` ranks rows of ``R`` instead and
    ``'random'`` draws uniformly (both are comparison baselines).  ``C`` and
    the full ``R`` may be passed when already available.
    """
    d, m = projector.d, projector.m
    if C is None or R is None:
        C, R = compute_window_residual(projector, F)
    if strategy == "projection":
        V = _row_space(C)
        norms = np.linalg.norm(R @ V, axis=1) if V.size else np.zeros(d)
    elif strategy == "residual":
        norms = np.linalg.norm(R, axis=1)
    elif strategy == "random":
        norms = None
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    if m_s is None:
        if tol is None:
            raise ValueError("give m_s or tol")
        ref = norms if norms is not None else np.linalg.norm(R @ _row_space(C), axis=1)
        m_s = max(m, int(np.count_nonzero(ref > tol)))
    m_s = min(int(m_s), d)
    if strategy == "random":
        rng = np.random.default_rng() if rng is None else rng
        idx = np.sort(rng.choice(d, size=m_s, replace=False))
    else:
        idx = _top_rows(norms, m_s)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return SamplingSet(idx, d)


def _projector_from(U, c, Utc, sigma=None):
    beta = deim_indices_greedy(U)
    proj = build_projector(U, beta, c, sigma=sigma, Utc=Utc)
    cond = proj.condition()
    if cond > PTU_COND_WARN:
        warnings.warn(f"cond(P^T U) = {cond:.2e}", RuntimeWarning, stacklevel=3)
    return proj


def adapt_basis(projector, sampling, C, StR, c, rank=None, rank_tol=None):
    """Rank-``r`` correction of ``U`` on the sampled rows and new greedy indices.

    Returns ``(new_projector, update)``.  Rows outside the sampling set are
    copied unchanged.  If the corrected basis cannot be interpolated (singular
    ``P^T U``) the update is discarded and the old projector is returned.
    """
    S = sampling.indices if isinstance(sampling, SamplingSet) else np.asarray(sampling, dtype=np.intp)
    upd = solve_rank_r_update(StR, C, rank=rank, rank_tol=rank_tol)
    if upd.rank == 0:
        return projector, upd
    U = projector.U.copy()
    U[S] += upd.a @ upd.b.T
    Utc = projector.Utc + upd.b @ (upd.a.T @ np.asarray(c, dtype=float)[S])
    try:
        return _projector_from(U, c, Utc, projector.sigma), upd
    except (SingularInterpolationError, np.linalg.LinAlgError):
        warnings.warn("adapted DEIM basis is singular on its indices; update skipped", RuntimeWarning, stacklevel=2)
        return projector, RankUpdate(upd.a[:, :0], upd.b[:, :0], upd.lam[:0], "rejected")


def reorthonormalize(projector, c):
    """Explicit recovery: orthonormalize ``U`` and re-select the indices."""
    Q, _ = la.qr(projector.U, mode="economic")
    return _projector_from(Q, c, None, projector.sigma)


def initial_projector_from_states(model, A, states, eta, m):
    """``(U_0, P_0)`` from reduced-Jacobian snapshots at full states (columns)."""
    M = collect_jacobian_snapshots(model, A, states, eta)
    U, sigma = pod_basis(M, m=m)
    return build_projector(U, deim_indices_greedy(U), model.c, sigma=sigma)


@dataclass
class UpdateContext:
    """What an ``on_update`` callback sees at adaptation ``j``."""

    j: int
    step: int
    window: np.ndarray
    before: DeimProjector
    after: DeimProjector
    sampling: SamplingSet
    C: np.ndarray
    update: RankUpdate
    sampled: bool


def gp_adeim_run(
    model,
    rom,
    cfg,
    eta,
    dt,
    n_steps,
    scheme="avf",
    newton=NewtonConfig(),
    quadrature=None,
    warmup=None,
    initial_projector=None,
    report=None,
    rng=None,
    on_update: Optional[Callable] = None,
    track_full_residual=False,
):
    """Adaptive hyper-reduced trajectory for one parameter.

    ``warmup`` holds the first ``delta0 + 1`` full states (rows); it is
    computed here when omitted and its cost goes to the offline bucket.
    ``initial_projector`` replaces the warm-up DEIM pair (training mode).
    Returns the reduced trajectory and the run report.
    """
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    A = rom.A
    report = report or RunReport()
    counters = report.counters
    rng = np.random.default_rng(0) if rng is None else rng
    if cfg.m > model.d:
        raise ValueError(f"m={cfg.m} exceeds d={model.d}")

    with report.timer("offline"):
        if initial_projector is None:
            if warmup is None:
                fom = OdeSystem.from_model(model)
                warmup = integrate_trajectory(
                    fom, model.initial_state(eta), eta, dt, min(cfg.delta0, n_steps), scheme, newton, quadrature
                ).states
            warmup = np.asarray(getattr(warmup, "states", warmup))[: cfg.delta0 + 1]
            projector = initial_projector_from_states(model, A, warmup.T, eta, cfg.m)
        else:
            projector = initial_projector
            if projector.m != cfg.m:
                raise ValueError(f"initial projector has m={projector.m}, config says m={cfg.m}")

    stepper = step_imr if scheme.lower() == "imr" else step_avf
    extra = {} if stepper is step_imr else {"quadrature": quadrature}
    window = WindowBuffer(cfg.w)
    sampling = None
    j = 0
    Z = np.empty((n_steps + 1, A.shape[1]))
    with report.timer("online"):
        Z[0] = A.T @ model.initial_state(eta)
        window.push(Z[0])
        hrm = HyperReducedModel(rom, projector)
        system = hrm.system(counters)
        for tau in range(1, n_steps + 1):
            try:
                Z[tau] = stepper(system, Z[tau - 1], eta, dt, newton, counters=counters, **extra)
            except Exception as exc:
                raise RuntimeError(f"adaptive run failed at step {tau} after {j} updates: {exc}") from exc
            window.push(Z[tau])
            if tau < cfg.delta0 or (tau - cfg.delta0) % cfg.delta or tau == n_steps:
                continue
            t_upd = time.perf_counter()
            F = window.snapshots(model, A, eta, counters)
            sampled = (tau - cfg.delta0) % cfg.gamma == 0 or sampling is None
            if sampled:
                C, R = compute_window_residual(projector, F)
                sampling = adapt_sampling(
                    projector, F, cfg.m_s, cfg.sample_tol, cfg.sampling, rng, C=C, R=R
                )
                StR = R[sampling.indices]
            else:
                C, StR = compute_window_residual(projector, F, sampling.indices)
            before = projector
            projector, upd = adapt_basis(projector, sampling, C, StR, model.c, cfg.rank, cfg.rank_tol)
            res_before = float(np.linalg.norm(StR))
            res_after = float(np.linalg.norm(StR + upd.a @ upd.b.T @ C)) if upd.rank else res_before
            row = {
                "update": j,
                "step": tau,
                "rank": upd.rank,
                "m_s": sampling.m_s,
                "res_before": res_before,
                "res_after": res_after,
                "sampled": int(sampled),
                "rows_touched": F.rows_touched,
                "bucket": "online",
                "wall_time": time.perf_counter() - t_upd,
            }
            if track_full_residual:
                Ffull = WindowSnapshots(model, A, window.states(), eta).full()
                Cf = before.coefficients(Ffull[before.beta])
                row["full_res_after"] = float(np.linalg.norm(projector.U @ Cf - Ffull))
            report.adapt_log.append(row)
            if on_update is not None:
                on_update(UpdateContext(j, tau, window.states(), before, projector, sampling, C, upd, sampled))
            j += 1
            if projector is not before:
                hrm = HyperReducedModel(rom, projector)
                system = hrm.system(counters)
    report.final_projector = projector
    return Trajectory(np.arange(n_steps + 1) * dt, Z), report
