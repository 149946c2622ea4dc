import numpy as np
import pytest

from gpdeim.model import NonlinearSchroedinger1D, ShallowWater2D, shift_model

# criterion id -> (passed, detail); filled by the acceptance tests
ACCEPTANCE = {}


def record_criterion(k, passed, detail):
    ACCEPTANCE[k] = (bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def nls_small():
    return NonlinearSchroedinger1D(l=0.5, n=32)


@pytest.fixture(scope="session")
def swe_small():
    return ShallowWater2D(nx1=6, nx2=5)


@pytest.fixture(scope="session", params=["nls", "swe", "nls-shift", "swe-shift"])
def any_model(request, nls_small, swe_small):
    base = nls_small if request.param.startswith("nls") else swe_small
    return shift_model(base) if request.param.endswith("shift") else base


def param_of(model):
    return model.param_box.mean(axis=1)


def random_state(model, rng, scale=0.3):
    return scale * rng.standard_normal(model.N)


def fd_gradient(f, x, h=1e-6):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g
