"""Error metrics, Hamiltonian tracking, spectra and CSV emitters."""

from __future__ import annotations

import csv
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

__all__ = [
    "Counters",
    "RunReport",
    "rel_errors",
    "hamiltonian_drift",
    "singular_spectrum",
    "fmt",
    "write_csv",
    "read_csv",
    "ERRORS_HEADER",
    "HAMILTONIAN_HEADER",
    "SPECTRUM_HEADER",
    "ADAPT_HEADER",
]

ERRORS_HEADER = ["run", "mode", "m", "E_L2", "E_fin"]
HAMILTONIAN_HEADER = ["t", "drift", "deim_gap"]
SPECTRUM_HEADER = ["index", "sigma"]
ADAPT_HEADER = ["update", "step", "rank", "m_s", "res_before", "res_after", "sampled", "rows_touched", "bucket"]


@dataclass
class Counters:
    """Row-evaluation and solver counters of one run."""

    g_rows: int = 0
    jac_rows: int = 0
    hess_rows: int = 0
    newton_iterations: int = 0

    def snapshot(self):
        return Counters(self.g_rows, self.jac_rows, self.hess_rows, self.newton_iterations)

    def __sub__(self, other):
        return Counters(
            self.g_rows - other.g_rows,
            self.jac_rows - other.jac_rows,
            self.hess_rows - other.hess_rows,
            self.newton_iterations - other.newton_iterations,
        )


@dataclass
class RunReport:
    hamiltonian: list = field(default_factory=list)
    state_norms: list = field(default_factory=list)
    counters: Counters = field(default_factory=Counters)
    timings: dict = field(default_factory=lambda: {"offline": 0.0, "online": 0.0})
    E_L2: float | None = None
    E_fin: float | None = None
    adapt_log: list = field(default_factory=list)
    spectra: dict = field(default_factory=dict)
    final_projector: object = None

    @contextmanager
    def timer(self, bucket):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[bucket] = self.timings.get(bucket, 0.0) + time.perf_counter() - t0

    def record(self, H, y):
        self.hamiltonian.append(float(H))
        self.state_norms.append(float(np.linalg.norm(y)))


def rel_errors(full_traj, reduced_traj, A=None):
    """Relative trajectory errors ``(E_L2, E_fin)``.

    ``full_traj`` has shape ``(n_t + 1, N)``; ``reduced_traj`` either holds
    reduced coordinates (lifted with ``A``) or full states when ``A`` is None.
    """
    Y = np.asarray(getattr(full_traj, "states", full_traj), dtype=float)
    Z = np.asarray(getattr(reduced_traj, "states", reduced_traj), dtype=float)
    if Y.shape[0] != Z.shape[0]:
        raise ValueError(f"trajectory lengths differ: {Y.shape[0]} vs {Z.shape[0]}")
    Yr = Z if A is None else Z @ np.asarray(getattr(A, "A", A)).T
    diff = np.sum((Y - Yr) ** 2, axis=1)
    ref = np.sum(Y**2, axis=1)
    if ref.sum() == 0.0 or ref[-1] == 0.0:
        raise ZeroDivisionError("reference trajectory is zero")
    return float(np.sqrt(diff.sum() / ref.sum())), float(np.sqrt(diff[-1] / ref[-1]))


def hamiltonian_drift(H, traj, eta, reference=None):
    """``|H(x^j) - H_ref|`` along a trajectory.

    ``H`` is any callable ``H(x, eta)``; the reference defaults to the value
    at the first state.
    """
    X = np.asarray(getattr(traj, "states", traj))
    if X.shape[0] == 0:
        raise ValueError("empty trajectory")
    vals = np.array([H(x, eta) for x in X])
    ref = vals[0] if reference is None else reference
    return np.abs(vals - ref)


def singular_spectrum(M):
    M = np.asarray(getattr(M, "matrix", M), dtype=float)
    if M.size == 0:
        raise ValueError("empty matrix")
    return la.svdvals(M)


def fmt(x):
    """Locale-free round-trip float formatting."""
    if isinstance(x, (float, np.floating)):
        return repr(float(x)) if np.isfinite(x) else str(float(x))
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]
