"""Offline/online pipeline behind the command line verbs.

Directory layout under ``run.out``::

    snapshots/snap_XXX.gphr    shifted FOM states (N x n_snap), one file per training parameter
    basis/A.gphr               orthosymplectic basis
    deim/U.gphr                POD basis of the reduced-Jacobian snapshots (d x m_max)
    deim/beta_mXX.gphr         greedy indices for every requested m
    deim/spectrum.csv          singular values of M_J
    reference/fom_pXX.gphr     FOM reference trajectories at the test parameters
    run_<mode>/errors.csv      one row per (parameter, m)
    run_<mode>/hamiltonian_*.csv, adapt_log_*.csv, timings.json
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .adapt import gp_adeim_run
from .container import config_hash, read_matrix, read_metadata, write_matrix
from .deim import (
    HyperReducedModel,
    JacobianSnapshotMatrix,
    build_projector,
    collect_jacobian_snapshots,
    deim_indices_greedy,
    pod_basis,
)
from .integrate import OdeSystem, integrate_trajectory
from .metrics import (
    ADAPT_HEADER,
    ERRORS_HEADER,
    HAMILTONIAN_HEADER,
    SPECTRUM_HEADER,
    RunReport,
    read_csv,
    rel_errors,
    singular_spectrum,
    write_csv,
)
from .reduce import SymplecticBasis, assemble_rom, complex_svd_basis, cotangent_lift_basis

__all__ = [
    "ArtifactError",
    "fom_trajectory",
    "cmd_snapshots",
    "cmd_build",
    "cmd_run",
    "cmd_report",
    "load_snapshots",
    "load_artifacts",
]


class ArtifactError(ValueError):
    """Required pipeline inputs are missing or inconsistent."""


def _meta(cfg, **extra):
    return {"config_hash": config_hash(cfg.raw), "version": __version__, **extra}


def fom_trajectory(model, cfg, eta, n_steps=None, counters=None):
    system = OdeSystem.from_model(model)
    return integrate_trajectory(
        system, model.initial_state(eta), eta, cfg.dt, cfg.n_steps if n_steps is None else n_steps,
        cfg.scheme, cfg.newton, cfg.quadrature, counters=counters,
    )


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def cmd_snapshots(cfg, threads=1):
    """FOM over the training grid; writes one container per parameter."""
    model = cfg.build_model()
    out = cfg.out / "snapshots"
    out.mkdir(parents=True, exist_ok=True)
    params = cfg.training_params()
    stride = int(cfg["reduction"]["snapshot_stride"])

    def work(item):
        i, eta = item
        traj = fom_trajectory(model, cfg, eta)
        cols = np.arange(0, len(traj), stride)
        path = out / f"snap_{i:03d}.gphr"
        write_matrix(path, traj.states[cols].T, _meta(cfg, eta=eta, times=traj.times[cols], stride=stride))
        return path

    return _map(work, list(enumerate(params)), threads)


def load_snapshots(out):
    files = sorted((Path(out) / "snapshots").glob("snap_*.gphr"))
    if not files:
        raise ArtifactError(f"no snapshot files in {Path(out) / 'snapshots'}; run 'snapshots' first")
    items = []
    for f in files:
        meta = read_metadata(f)
        items.append((np.asarray(meta["eta"], dtype=float), read_matrix(f), np.asarray(meta["times"])))
    return items


def _make_basis(kind, Y, k):
    return complex_svd_basis(Y, k) if kind == "complex-svd" else cotangent_lift_basis(Y, k)


def cmd_build(cfg):
    """Basis, DEIM basis and indices from stored snapshots; never writes an uncertified basis."""
    model = cfg.build_model()
    snaps = load_snapshots(cfg.out)
    Y = np.hstack([s for _, s, _ in snaps])
    k = int(cfg["reduction"]["k"])
    basis = _make_basis(cfg["reduction"]["basis"], Y, k)
    ortho, sympl = basis.certify()

    bdir = cfg.out / "basis"
    bdir.mkdir(parents=True, exist_ok=True)
    write_matrix(bdir / "A.gphr", basis.A, _meta(cfg, kind=basis.kind, k=k, ortho_residual=ortho,
                                                 symplectic_residual=sympl))
    write_csv(bdir / "spectrum_states.csv", SPECTRUM_HEADER, enumerate(basis.sigma.tolist(), 1))

    # Jacobian snapshots every `stride` stored snapshot columns
    rel = int(cfg["deim"]["snapshot_stride"])
    stride = max(1, rel // int(cfg["reduction"]["snapshot_stride"]))
    blocks = [collect_jacobian_snapshots(model, basis, s[:, ::stride], eta, t[::stride]) for eta, s, t in snaps]
    MJ = JacobianSnapshotMatrix.concatenate(blocks)
    m_vals = cfg.m_values
    energy_tol = cfg["deim"]["energy_tol"]
    if energy_tol is not None:
        U, sigma = pod_basis(MJ, tol=float(energy_tol))
        m_vals = [U.shape[1]]
    else:
        # m = d needs no data: any square orthonormal U gives the identity projector
        pod_m = [m for m in m_vals if m != model.d]
        if pod_m:
            U, sigma = pod_basis(MJ, m=max(pod_m))
        else:
            U, sigma = np.eye(model.d), singular_spectrum(MJ)
    ddir = cfg.out / "deim"
    ddir.mkdir(parents=True, exist_ok=True)
    write_matrix(ddir / "U.gphr", U, _meta(cfg, m_values=m_vals, n_blocks=MJ.n_blocks))
    write_csv(ddir / "spectrum.csv", SPECTRUM_HEADER, enumerate(sigma.tolist(), 1))
    if cfg["deim"].get("store_mj"):
        write_matrix(ddir / "MJ.gphr", MJ.matrix, _meta(cfg))
    for m in m_vals:
        beta = np.arange(model.d) if m == model.d else deim_indices_greedy(U[:, :m])
        write_matrix(ddir / f"beta_m{m:04d}.gphr", beta.astype(float), _meta(cfg, m=m))
    return {"basis": bdir / "A.gphr", "U": ddir / "U.gphr", "m_values": m_vals}


def load_artifacts(cfg):
    a_path = cfg.out / "basis" / "A.gphr"
    u_path = cfg.out / "deim" / "U.gphr"
    if not a_path.exists():
        raise ArtifactError(f"missing {a_path}; run 'build' first")
    meta = read_metadata(a_path)
    basis = SymplecticBasis(read_matrix(a_path), meta.get("kind", "given"))
    U = read_matrix(u_path) if u_path.exists() else None
    betas = {}
    for f in sorted((cfg.out / "deim").glob("beta_m*.gphr")):
        betas[int(read_metadata(f)["m"])] = read_matrix(f)[:, 0].astype(np.intp)
    return basis, U, betas


def _reference(model, cfg, i, eta):
    """FOM reference at a test parameter, cached on disk."""
    rdir = cfg.out / "reference"
    rdir.mkdir(parents=True, exist_ok=True)
    path = rdir / f"fom_p{i:02d}.gphr"
    if path.exists():
        meta = read_metadata(path)
        if meta.get("config_hash_time") == _time_hash(cfg) and np.allclose(meta.get("eta"), eta, rtol=0, atol=0):
            return read_matrix(path).T
    traj = fom_trajectory(model, cfg, eta)
    write_matrix(path, traj.states.T, {"eta": eta, "config_hash_time": _time_hash(cfg)})
    return traj.states


def _time_hash(cfg):
    return config_hash({"problem": cfg["problem"], "time": cfg["time"]})


def cmd_run(cfg, mode=None, threads=1):
    """Run ``mode`` at every test parameter and write the CSV reports."""
    mode = mode or cfg.mode
    model = cfg.build_model()
    rdir = cfg.out / f"run_{mode}"
    rdir.mkdir(parents=True, exist_ok=True)
    if mode != "fom":
        basis, U, betas = load_artifacts(cfg)
        rom = assemble_rom(model, basis)
        A = basis.A
    if mode == "hrom":
        if U is None:
            raise ArtifactError("mode 'hrom' needs deim/U.gphr; run 'build' first")
        missing = [m for m in cfg.m_values if m not in betas]
        if missing and cfg["deim"]["energy_tol"] is None:
            raise ArtifactError(f"no DEIM indices for m={missing}; rebuild")
    err_rows, timings = [], {}

    for i, eta in enumerate(cfg.test_params):
        Y = _reference(model, cfg, i, eta)
        H0 = model.hamiltonian(Y[0], eta)
        if mode == "fom":
            err_rows.append((f"p{i:02d}", mode, 0, 0.0, 0.0))
            write_csv(rdir / f"hamiltonian_p{i:02d}.csv", HAMILTONIAN_HEADER,
                      _drift_rows(model, Y, eta, cfg.dt, H0, np.zeros(len(Y))))
            continue
        if mode == "rom":
            report = RunReport()
            with report.timer("online"):
                traj = integrate_trajectory(rom.system(report.counters), A.T @ Y[0], eta, cfg.dt, cfg.n_steps,
                                            cfg.scheme, cfg.newton, cfg.quadrature, counters=report.counters)
            e = rel_errors(Y, traj, A)
            err_rows.append((f"p{i:02d}", mode, 0, *e))
            lifted = traj.states @ A.T
            write_csv(rdir / f"hamiltonian_p{i:02d}.csv", HAMILTONIAN_HEADER,
                      _drift_rows(model, lifted, eta, cfg.dt, H0))
            timings[f"p{i:02d}"] = report.timings
            continue
        m_list = list(betas) if cfg["deim"]["energy_tol"] is not None else cfg.m_values
        for m in m_list:
            tag = f"p{i:02d}_m{m:04d}"
            report = RunReport()
            if mode == "hrom":
                Um = np.eye(model.d) if m == model.d else U[:, :m]
                proj = build_projector(Um, betas[m], model.c)
                hrm = HyperReducedModel(rom, proj)
                with report.timer("online"):
                    traj = integrate_trajectory(hrm.system(report.counters), A.T @ Y[0], eta, cfg.dt, cfg.n_steps,
                                                cfg.scheme, cfg.newton, cfg.quadrature, counters=report.counters)
                gaps = np.array([_gap(model, proj, A @ z, eta) for z in traj.states])
            else:
                acfg = cfg.adapt_config(m)
                init = None
                if m == model.d:
                    # exact DEIM pair; the residual vanishes and no update fires
                    init = build_projector(np.eye(model.d), np.arange(model.d), model.c)
                elif acfg.init == "training":
                    if U is None or m not in betas:
                        raise ArtifactError(f"training init needs DEIM artifacts for m={m}")
                    init = build_projector(U[:, :m], betas[m], model.c)
                traj, report = gp_adeim_run(
                    model, rom, acfg, eta, cfg.dt, cfg.n_steps, cfg.scheme, cfg.newton, cfg.quadrature,
                    warmup=Y[: acfg.delta0 + 1], initial_projector=init, report=report,
                    rng=np.random.default_rng(int(cfg["run"]["seed"])),
                )
                gaps = None
                write_csv(rdir / f"adapt_log_{tag}.csv", ADAPT_HEADER,
                          [[row[h] for h in ADAPT_HEADER] for row in report.adapt_log])
            e = rel_errors(Y, traj, A)
            err_rows.append((f"p{i:02d}", mode, m, *e))
            write_csv(rdir / f"hamiltonian_{tag}.csv", HAMILTONIAN_HEADER,
                      _drift_rows(model, traj.states @ A.T, eta, cfg.dt, H0, gaps))
            timings[tag] = {**report.timings, "counters": vars(report.counters)}
    write_csv(rdir / "errors.csv", ERRORS_HEADER, err_rows)
    with open(rdir / "timings.json", "w") as fh:
        json.dump(timings, fh, indent=2, sort_keys=True)
    return rdir


def _gap(model, proj, y, eta):
    g = model.G(y, eta)
    return abs(float(model.c @ (proj.apply(g) - g)))


def _drift_rows(model, lifted, eta, dt, H0, gaps=None):
    """``(t, |H(A z^j) - H(y^0)|, DEIM gap)`` per step; the gap is NaN when not tracked."""
    H = np.array([model.hamiltonian(y, eta) for y in lifted])
    if gaps is None:
        gaps = np.full(len(H), np.nan)
    return [(j * dt, float(abs(H[j] - H0)), float(gaps[j])) for j in range(len(H))]


def cmd_report(cfg):
    """Merge ``run_*/errors.csv`` into ``summary.csv`` and ``summary.md``."""
    sources = sorted(cfg.out.glob("run_*/errors.csv"))
    if not sources:
        raise ArtifactError(f"no run outputs under {cfg.out}; expected run_<mode>/errors.csv")
    rows = []
    for src in sources:
        header, body = read_csv(src)
        if header != ERRORS_HEADER:
            raise ArtifactError(f"{src}: unexpected header {header}")
        rows.extend(body)
    out = cfg.out / "summary.csv"
    with open(out, "w") as fh:
        fh.write(",".join(ERRORS_HEADER) + "\n")
        for r in rows:
            fh.write(",".join(r) + "\n")
    lines = ["| run | mode | m | E_L2 | E_fin | max drift |", "|---|---|---|---|---|---|"]
    for r in rows:
        run, mode, m = r[0], r[1], r[2]
        tag = run if mode in ("fom", "rom") else f"{run}_m{int(m):04d}"
        hpath = cfg.out / f"run_{mode}" / f"hamiltonian_{tag}.csv"
        drift = "n/a"
        if hpath.exists():
            _, hb = read_csv(hpath)
            drift = repr(max(float(x[1]) for x in hb))
        lines.append(f"| {run} | {mode} | {m} | {r[3]} | {r[4]} | {drift} |")
    (cfg.out / "summary.md").write_text("\n".join(lines) + "\n")
    return out, len(rows)
