import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import fd_gradient, param_of, random_state
from gpdeim.model import (
    NonlinearSchroedinger1D,
    ShallowWater2D,
    build_nls1d,
    build_swe2d,
    periodic_first_derivative,
    periodic_second_derivative,
    poisson_apply,
    shift_model,
)


def dense_J(n):
    return np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), np.zeros((n, n))]])


def nls_hamiltonian_by_hand(y, eps, dx):
    """Loop over grid points; periodic forward differences."""
    n = y.size // 2
    q, p = y[:n], y[n:]
    H = 0.0
    for i in range(n):
        j = (i + 1) % n
        H += 0.5 * ((q[j] - q[i]) ** 2 + (p[j] - p[i]) ** 2) / dx**2
        H -= 0.25 * eps * (q[i] ** 2 + p[i] ** 2) ** 2
    return H


def swe_hamiltonian_by_hand(model, y, gamma):
    n = model.n
    chi = y[:n].reshape(model.nx2, model.nx1)
    phi = y[n:].reshape(model.nx2, model.nx1)
    d1 = (np.roll(phi, -1, axis=1) - np.roll(phi, 1, axis=1)) / (2 * model.dx1)
    d2 = (np.roll(phi, -1, axis=0) - np.roll(phi, 1, axis=0)) / (2 * model.dx2)
    return float(np.sum(0.5 * gamma * chi**2 + 0.5 * gamma * chi * (d1**2 + d2**2)))


def test_poisson_apply_matches_dense(rng):
    n = 5
    v = rng.standard_normal(2 * n)
    M = rng.standard_normal((2 * n, 3))
    assert np.array_equal(poisson_apply(v), dense_J(n) @ v)
    assert np.allclose(poisson_apply(M), dense_J(n) @ M)
    S = sp.random(2 * n, 4, density=0.5, random_state=1, format="csr")
    assert np.allclose(poisson_apply(S).toarray(), dense_J(n) @ S.toarray())
    with pytest.raises(ValueError):
        poisson_apply(np.ones(3))


@given(arrays(np.float64, st.integers(1, 8).map(lambda k: 2 * k), elements=st.floats(-1e3, 1e3)))
def test_poisson_apply_squares_to_minus_identity(v):
    assert np.array_equal(poisson_apply(poisson_apply(v)), -v)


def test_periodic_derivatives_exact_on_trig():
    n, L = 64, 2 * np.pi
    h = L / n
    x = np.arange(n) * h
    D1 = periodic_first_derivative(n, h)
    D2 = periodic_second_derivative(n, h)
    # symbols of the centered stencils applied to sin(x)
    assert np.allclose(D1 @ np.sin(x), np.sin(h) / h * np.cos(x))
    assert np.allclose(D2 @ np.sin(x), -(2 - 2 * np.cos(h)) / h**2 * np.sin(x))
    assert abs(D1 - (-D1.T)).max() == 0
    assert abs(D2 - D2.T).max() == 0


def test_nls_matches_hand_summation(rng):
    model = NonlinearSchroedinger1D(l=0.7, n=4)
    for eps in (0.9, 1.0, 1.1):
        y = rng.standard_normal(8)
        assert model.hamiltonian(y, eps) == pytest.approx(nls_hamiltonian_by_hand(y, eps, model.dx), rel=1e-13)


def test_swe_matches_grid_formula(rng, swe_small):
    for _ in range(3):
        y = rng.standard_normal(swe_small.N)
        eta = np.array([1.4, 0.9])
        assert swe_small.hamiltonian(y, eta) == pytest.approx(swe_hamiltonian_by_hand(swe_small, y, 0.9), rel=1e-12)


def test_swe_stencil_layout(swe_small):
    m = swe_small
    # row 0 is grid point (0, 0); its east neighbour is (1, 0), west (nx1-1, 0)
    assert list(m.stencil[0]) == [0, m.n + 1, m.n + m.nx1 - 1, m.n + m.nx1, m.n + m.nx1 * (m.nx2 - 1)]
    assert m.s1 == 1 and m.s2 == 4 and m.d == m.n


def test_gradient_matches_fd(any_model, rng):
    eta = param_of(any_model)
    y = random_state(any_model, rng)
    g = any_model.gradient(y, eta)
    g_fd = fd_gradient(lambda x: any_model.hamiltonian(x, eta), y)
    assert np.allclose(g, g_fd, rtol=1e-6, atol=1e-6 * np.abs(g).max())


def test_hessian_matches_fd(any_model, rng):
    eta = param_of(any_model)
    y = random_state(any_model, rng)
    H = any_model.hessian(y, eta).toarray()
    assert np.allclose(H, H.T, atol=1e-12)
    H_fd = np.column_stack([
        (any_model.gradient(y + 1e-6 * e, eta) - any_model.gradient(y - 1e-6 * e, eta)) / 2e-6
        for e in np.eye(any_model.N)
    ])
    assert np.allclose(H, H_fd, atol=1e-6 * max(1.0, np.abs(H).max()))


def test_jac_rows_match_fd_of_G(any_model, rng):
    eta = param_of(any_model)
    y = random_state(any_model, rng)
    rows = np.array([0, 3, any_model.d - 1])
    J = any_model.jac_rows(y, eta, rows).toarray()
    J_fd = np.column_stack([
        (any_model.G(y + 1e-6 * e, eta, rows) - any_model.G(y - 1e-6 * e, eta, rows)) / 2e-6
        for e in np.eye(any_model.N)
    ])
    assert np.allclose(J, J_fd, atol=1e-7 * max(1.0, np.abs(J).max()))
    # sparsity: only stencil columns are nonzero
    for r, row in zip(rows, J):
        assert set(np.flatnonzero(row)) <= set(any_model.stencil[r])


def test_row_subset_equals_full_evaluation(any_model, rng):
    eta = param_of(any_model)
    y = random_state(any_model, rng)
    rows = rng.choice(any_model.d, 5, replace=False)
    assert np.array_equal(any_model.G(y, eta, rows), any_model.G(y, eta)[rows])


def test_shifted_model_keeps_hamiltonian(rng, swe_small):
    eta = np.array([1.3, 1.1])
    shifted = shift_model(swe_small)
    y0 = swe_small.initial_state(eta)
    ys = random_state(swe_small, rng)
    assert shifted.hamiltonian(ys, eta) == pytest.approx(swe_small.hamiltonian(ys + y0, eta), rel=1e-12)
    assert np.allclose(shifted.gradient(ys, eta), swe_small.gradient(ys + y0, eta))
    assert np.array_equal(shifted.G(np.zeros(shifted.N), eta), np.zeros(shifted.d))
    assert np.array_equal(shifted.initial_state(eta), np.zeros(shifted.N))
    assert np.array_equal(shifted.unshift(ys, eta), ys + y0)
    # the shift follows the parameter
    assert not np.array_equal(shifted.shift_state([1.2, 1.0]), shifted.shift_state([1.6, 1.0]))
    assert shifted.dx1 == swe_small.dx1


def test_shift_with_fixed_state(rng, nls_small):
    y0 = random_state(nls_small, rng)
    shifted = shift_model(nls_small, y0)
    with pytest.raises(ValueError):
        shift_model(nls_small, np.ones(3)).shift_state(1.0)
    with pytest.raises(ValueError):
        shift_model(nls_small, np.full(nls_small.N, np.nan)).shift_state(1.0)
    assert shifted.hamiltonian(np.zeros(nls_small.N), 1.0) == pytest.approx(nls_small.hamiltonian(y0, 1.0))


def test_input_validation(nls_small):
    with pytest.raises(ValueError):
        nls_small.hamiltonian(np.zeros(3), 1.0)
    with pytest.raises(IndexError):
        nls_small.G(np.zeros(nls_small.N), 1.0, [nls_small.d])
    with pytest.raises(ValueError):
        nls_small.hamiltonian(np.zeros(nls_small.N), [1.0, 2.0])
    with pytest.warns(UserWarning, match="outside"):
        nls_small.hamiltonian(np.zeros(nls_small.N), 2.0)
    with pytest.raises(ValueError):
        ShallowWater2D(nx1=2)
    with pytest.raises(ValueError):
        build_nls1d({"n": 0})


def test_builders_read_config():
    m = build_swe2d({"nx": 8, "L": 1.0})
    assert (m.nx1, m.nx2, m.dx1) == (8, 8, 0.25)
    nls = build_nls1d({"n": 64, "l": 0.11})
    assert nls.N == 128 and nls.dx == pytest.approx(2 * np.pi / 0.11 / 64)


def test_initial_conditions():
    swe = ShallowWater2D(nx1=8, nx2=8)
    y = swe.initial_state([1.5, 1.0])
    assert y[: swe.n].max() == pytest.approx(1.5)  # peak at the origin grid point
    assert np.all(y[swe.n:] == 0)
    nls = NonlinearSchroedinger1D(n=64)
    u = nls.initial_state(1.0)
    modulus = np.hypot(u[:64], u[64:])
    assert np.allclose(modulus, np.sqrt(2) / np.cosh(nls.x))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.9, 1.1))
def test_nls_gradient_property(seed, eps):
    model = NonlinearSchroedinger1D(l=0.5, n=8)
    y = np.random.default_rng(seed).standard_normal(16)
    assert np.allclose(model.gradient(y, eps), fd_gradient(lambda x: model.hamiltonian(x, eps), y),
                       rtol=1e-5, atol=1e-5)
