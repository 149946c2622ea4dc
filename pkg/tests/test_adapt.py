import itertools
import warnings

import numpy as np
import pytest
import scipy.linalg as la
from hypothesis import given, settings
from hypothesis import strategies as st

from gpdeim.adapt import (
    AdaptConfig,
    SamplingSet,
    WindowBuffer,
    WindowSnapshots,
    adapt_basis,
    adapt_sampling,
    compute_window_residual,
    gp_adeim_run,
    initial_projector_from_states,
    reorthonormalize,
    solve_rank_r_update,
)
from gpdeim.deim import HyperReducedModel, build_projector, deim_indices_greedy
from gpdeim.integrate import NewtonConfig, OdeSystem, integrate_trajectory
from gpdeim.model import NonlinearSchroedinger1D, shift_model
from gpdeim.reduce import assemble_rom, complex_svd_basis


def row_space_projector(C):
    return C.T @ np.linalg.pinv(C @ C.T) @ C


def random_instance(rng, m_s, m, wbar, rank_c=None):
    StR = rng.standard_normal((m_s, wbar))
    if rank_c is None:
        C = rng.standard_normal((m, wbar))
    else:
        C = rng.standard_normal((m, rank_c)) @ rng.standard_normal((rank_c, wbar))
    return StR, C


def gen_eig_oracle(StR, C):
    """Eigenvalues of C (S^T R)^T (S^T R) C^T v = lam C C^T v, descending."""
    K = StR @ C.T
    lam = la.eigh(K.T @ K, C @ C.T, eigvals_only=True)
    return np.sort(lam)[::-1]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 16), st.integers(1, 8), st.integers(1, 24), st.integers(1, 8))
def test_update_error_identity(seed, m_s, m, wbar, r):
    rng = np.random.default_rng(seed)
    StR, C = random_instance(rng, m_s, m, wbar)
    upd = solve_rank_r_update(StR, C, rank=r)
    after = np.linalg.norm(StR + upd.a @ upd.b.T @ C) ** 2
    before = np.linalg.norm(StR) ** 2
    scale = max(before, 1.0)
    assert after == pytest.approx(before - upd.lam.sum(), abs=1e-9 * scale)
    if upd.path == "cholesky" and m <= wbar:
        lam = gen_eig_oracle(StR, C)
        assert np.allclose(upd.lam, lam[: upd.rank], atol=1e-9 * scale)
    assert upd.rank <= min(r, m_s, m, wbar)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 16), st.integers(1, 8), st.integers(1, 24))
def test_full_rank_update_reaches_least_squares_optimum(seed, m_s, m, wbar):
    rng = np.random.default_rng(seed)
    rank_c = min(m, wbar) if rng.random() < 0.5 else max(1, min(m, wbar) - 1)
    StR, C = random_instance(rng, m_s, m, wbar, rank_c=rank_c)
    upd = solve_rank_r_update(StR, C, rank=None, rank_tol=0.0)
    after = np.linalg.norm(StR + upd.a @ upd.b.T @ C) ** 2
    target = np.linalg.norm(StR @ (np.eye(wbar) - row_space_projector(C))) ** 2
    # unconstrained least squares over all m_s x m corrections X
    X = -StR @ np.linalg.pinv(C)
    lsq = np.linalg.norm(StR + X @ C) ** 2
    scale = max(np.linalg.norm(StR) ** 2, 1.0)
    assert after == pytest.approx(target, abs=1e-9 * scale)
    assert after == pytest.approx(lsq, abs=1e-9 * scale)


def test_qr_path_on_rank_deficient_coefficients(rng):
    StR, C = random_instance(rng, 10, 6, 15, rank_c=3)
    upd = solve_rank_r_update(StR, C, rank=6)
    assert upd.path == "qr" and upd.rank == 3
    after = np.linalg.norm(StR + upd.a @ upd.b.T @ C) ** 2
    assert after == pytest.approx(np.linalg.norm(StR) ** 2 - upd.lam.sum(), rel=1e-10)
    assert after == pytest.approx(np.linalg.norm(StR @ (np.eye(15) - row_space_projector(C))) ** 2, rel=1e-9)


def test_rank_policy(rng):
    StR, C = random_instance(rng, 8, 5, 12)
    assert solve_rank_r_update(StR, C, rank=2).rank == 2
    assert solve_rank_r_update(StR, C, rank=50).rank == 5
    assert solve_rank_r_update(StR, C, rank=0).rank == 0
    sig = la.svdvals(StR @ C.T)
    tol = 0.5 * (sig[1] + sig[2]) / sig[0]
    assert solve_rank_r_update(StR, C, rank_tol=tol).rank == 2
    assert solve_rank_r_update(np.zeros((8, 12)), C, rank=3).rank == 0
    with pytest.raises(ValueError):
        solve_rank_r_update(StR, C[:, :5])


def rho_identity_terms(rng, d, m, wbar, m_s):
    U = np.linalg.qr(rng.standard_normal((d, m)))[0]
    proj = build_projector(U, deim_indices_greedy(U), np.ones(d))
    F = rng.standard_normal((d, wbar))
    C, R = compute_window_residual(proj, F)
    S = np.sort(rng.choice(d, m_s, replace=False))
    return proj, F, C, R, S


@pytest.mark.parametrize("seed", range(10))
def test_rho_identity(seed):
    rng = np.random.default_rng(seed)
    d, m, wbar, m_s = 12, 3, 5, 5
    proj, F, C, R, S = rho_identity_terms(rng, d, m, wbar, m_s)
    upd = solve_rank_r_update(R[S], C, rank=None, rank_tol=0.0)
    U_new = proj.U.copy()
    U_new[S] += upd.a @ upd.b.T
    CC = row_space_projector(C)
    Sc = np.setdiff1d(np.arange(d), S)
    lhs = np.linalg.norm(U_new @ C - F) ** 2
    rho2_a = np.linalg.norm(R @ (np.eye(wbar) - CC)) ** 2 + np.linalg.norm(R[Sc] @ CC) ** 2
    rho2_b = np.linalg.norm(R) ** 2 - np.linalg.norm(R[S] @ CC) ** 2
    assert lhs == pytest.approx(rho2_a, rel=1e-10)
    assert lhs == pytest.approx(rho2_b, rel=1e-10)


@pytest.mark.parametrize("d,m_s", [(6, 2), (8, 3), (10, 4), (12, 5)])
def test_projection_sampling_is_optimal(d, m_s):
    rng = np.random.default_rng(d)
    for _ in range(5):
        proj, F, C, R, _ = rho_identity_terms(rng, d, 2, 4, m_s)
        CC = row_space_projector(C)
        sel = adapt_sampling(proj, F, m_s=m_s)
        best = max(np.linalg.norm(R[list(S)] @ CC) for S in itertools.combinations(range(d), m_s))
        assert np.linalg.norm(R[sel.indices] @ CC) == pytest.approx(best, rel=1e-12)


def test_sampling_strategies_and_tolerance(rng):
    proj, F, C, R, _ = rho_identity_terms(rng, 20, 3, 6, 4)
    norms = np.linalg.norm(R @ row_space_projector(C), axis=1)
    tol = np.sort(norms)[-7]
    assert adapt_sampling(proj, F, tol=tol * 0.999999).m_s == 7
    assert adapt_sampling(proj, F, tol=1e6).m_s == 3  # floored at m
    res = adapt_sampling(proj, F, m_s=4, strategy="residual")
    assert set(res.indices) == set(np.argsort(-np.linalg.norm(R, axis=1))[:4])
    r1 = adapt_sampling(proj, F, m_s=5, strategy="random", rng=np.random.default_rng(3))
    r2 = adapt_sampling(proj, F, m_s=5, strategy="random", rng=np.random.default_rng(3))
    assert np.array_equal(r1.indices, r2.indices) and r1.m_s == 5
    with pytest.raises(ValueError):
        adapt_sampling(proj, F, m_s=4, strategy="magic")
    with pytest.raises(ValueError):
        adapt_sampling(proj, F)


def test_sampling_set_checks():
    with pytest.raises(ValueError):
        SamplingSet([1, 1], 5)
    with pytest.raises(IndexError):
        SamplingSet([5], 5)
    with pytest.warns(RuntimeWarning):
        SamplingSet([0, 1, 2], 4)
    assert list(SamplingSet([1, 3], 6).complement()) == [0, 2, 4, 5]


def test_adapt_basis_is_local(rng):
    d, m = 30, 4
    proj, F, C, R, S = rho_identity_terms(rng, d, m, 6, 8)
    c = rng.standard_normal(d)
    proj = build_projector(proj.U, proj.beta, c)
    new, upd = adapt_basis(proj, SamplingSet(S, d), C, R[S], c, rank=2)
    Sc = np.setdiff1d(np.arange(d), S)
    assert upd.rank == 2
    assert np.array_equal(new.U[Sc], proj.U[Sc])  # bitwise untouched
    assert not np.allclose(new.U[S], proj.U[S])
    assert np.allclose(new.Utc, new.U.T @ c, atol=1e-12)
    assert np.array_equal(new.beta, deim_indices_greedy(new.U))
    assert np.allclose(new.weights, np.linalg.solve(new.U[new.beta].T, new.U.T @ c))
    same, none = adapt_basis(proj, S, C, np.zeros_like(R[S]), c, rank=2)
    assert same is proj and none.rank == 0


def test_reorthonormalize(rng):
    U = rng.standard_normal((10, 3))
    c = np.ones(10)
    proj = reorthonormalize(build_projector(U, deim_indices_greedy(U), c), c)
    assert np.allclose(proj.U.T @ proj.U, np.eye(3))


def test_adapt_config_messages():
    with pytest.raises(ValueError, match=r"w \(5\) must be smaller than delta0 \(5\)"):
        AdaptConfig(m=3, w=5, delta0=5)
    with pytest.raises(ValueError, match=r"gamma \(7\) must be a multiple of delta \(5\)"):
        AdaptConfig(m=3, gamma=7)
    with pytest.raises(ValueError, match=r"m_s \(2\) must be >= m \(3\)"):
        AdaptConfig(m=3, m_s=2)
    with pytest.raises(ValueError, match="rank"):
        AdaptConfig(m=3, rank=None, rank_tol=None)
    with pytest.raises(ValueError, match="sampling"):
        AdaptConfig(m=3, sampling="best")


def test_window_buffer():
    buf = WindowBuffer(2)
    buf.push(np.zeros(3))
    assert not buf.full
    with pytest.raises(ValueError):
        buf.snapshots(None, np.zeros((6, 3)), 1.0)
    buf.push(np.ones(3))
    buf.push(2 * np.ones(3))
    assert buf.full and np.array_equal(buf.states()[:, 0], [1.0, 2.0])
    with pytest.raises(ValueError):
        WindowBuffer(0)


@pytest.fixture(scope="module")
def tiny_problem():
    model = shift_model(NonlinearSchroedinger1D(l=0.3, n=48))
    eta, dt = np.array([1.0]), 0.02
    newton = NewtonConfig(1e-11)
    fom = integrate_trajectory(OdeSystem.from_model(model), model.initial_state(eta), eta, dt, 40, "avf", newton)
    basis = complex_svd_basis(fom.states.T, 6)
    return model, assemble_rom(model, basis), eta, dt, newton, fom


def test_window_snapshots_rows(tiny_problem, rng):
    model, rom, eta, *_ = tiny_problem
    states = 0.1 * rng.standard_normal((2, rom.dim))
    ws = WindowSnapshots(model, rom.A, states, eta)
    full = ws.full()
    assert full.shape == ws.shape == (model.d, 2 * rom.dim)
    rows = np.array([3, 7, 11])
    assert np.array_equal(ws.rows(rows), full[rows])
    assert ws.rows_touched == (model.d + 3) * 2


def test_schedule_and_cost_contract(tiny_problem):
    model, rom, eta, dt, newton, fom = tiny_problem
    cfg = AdaptConfig(m=4, delta0=4, delta=3, gamma=6, w=2, m_s=8, sample_tol=None)
    seen = []
    traj, report = gp_adeim_run(model, rom, cfg, eta, dt, 40, "avf", newton, warmup=fom.states,
                                on_update=seen.append)
    steps = [row["step"] for row in report.adapt_log]
    assert steps == list(range(4, 40, 3))  # step 40 = n_t is skipped
    for row in report.adapt_log:
        sampled = (row["step"] - 4) % 6 == 0
        assert row["sampled"] == int(sampled)
        assert row["rows_touched"] == ((cfg.m + model.d) if sampled else (cfg.m + cfg.m_s)) * cfg.w
        assert row["res_after"] <= row["res_before"] * (1 + 1e-12)
    assert [ctx.step for ctx in seen] == steps
    assert report.final_projector is seen[-1].after
    assert traj.states.shape == (41, rom.dim)


def test_rank_zero_equals_nonadaptive(tiny_problem):
    model, rom, eta, dt, newton, fom = tiny_problem
    cfg = AdaptConfig(m=4, rank=0, m_s=8, sample_tol=None)
    traj, _ = gp_adeim_run(model, rom, cfg, eta, dt, 30, "avf", newton, warmup=fom.states)
    proj = initial_projector_from_states(model, rom.A, fom.states[:6].T, eta, 4)
    hrm = HyperReducedModel(rom, proj)
    ref = integrate_trajectory(hrm.system(), np.zeros(rom.dim), eta, dt, 30, "avf", newton)
    assert np.array_equal(traj.states, ref.states)


def test_adaptive_run_without_warmup_and_checks(tiny_problem):
    model, rom, eta, dt, newton, fom = tiny_problem
    cfg = AdaptConfig(m=4, m_s=8, sample_tol=None)
    a, rep = gp_adeim_run(model, rom, cfg, eta, dt, 12, "avf", newton)
    b, _ = gp_adeim_run(model, rom, cfg, eta, dt, 12, "avf", newton, warmup=fom.states)
    assert np.array_equal(a.states, b.states)
    assert rep.timings["offline"] > 0
    proj = initial_projector_from_states(model, rom.A, fom.states[:6].T, eta, 3)
    with pytest.raises(ValueError, match="m=3"):
        gp_adeim_run(model, rom, cfg, eta, dt, 12, initial_projector=proj)
    with pytest.raises(ValueError):
        gp_adeim_run(model, rom, AdaptConfig(m=10**4), eta, dt, 12)


def test_tracked_full_residual_matches_rho(tiny_problem):
    model, rom, eta, dt, newton, fom = tiny_problem
    cfg = AdaptConfig(m=4, delta0=4, delta=2, gamma=2, w=3, m_s=10, sample_tol=None, rank_tol=0.0)
    checks = []

    def on_update(ctx):
        F = WindowSnapshots(model, rom.A, ctx.window, eta).full()
        C, R = compute_window_residual(ctx.before, F)
        CC = row_space_projector(C)
        S = ctx.sampling.indices
        rho2 = np.linalg.norm(R) ** 2 - np.linalg.norm(R[S] @ CC) ** 2
        checks.append((np.linalg.norm(ctx.after.U @ C - F) ** 2, rho2))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        _, report = gp_adeim_run(model, rom, cfg, eta, dt, 20, "avf", newton, warmup=fom.states,
                                 on_update=on_update, track_full_residual=True)
    assert checks
    for (lhs, rho2), row in zip(checks, report.adapt_log):
        assert lhs == pytest.approx(rho2, rel=1e-8, abs=1e-20)
        assert row["full_res_after"] ** 2 == pytest.approx(lhs, rel=1e-8, abs=1e-20)
