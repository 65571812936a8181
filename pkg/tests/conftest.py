import numpy as np
import pytest

from minbsde.forward import TimeGrid, simulate_paths
from minbsde.model import DriverSpec, FiniteJumpMeasure, ModelSpec, RegimeSet, make_catalog_problem


def const_model(b=0.0, s=0.0, beta=None, rho=None, g=None, T=1.0, driver=None):
    """One-dimensional model with constant coefficients and optional single big-jump atom."""
    kw = {}
    if beta is not None:
        kw["jump_coef"] = lambda x, a, ell: np.full_like(x, beta)
        kw["big_jump_measure"] = FiniteJumpMeasure([[1.0]], [rho])
    if driver is not None:
        kw["driver"] = driver
    return ModelSpec(1, T, lambda x, a: np.full_like(x, b),
                     lambda x, a: np.full((x.shape[0], 1, 1), s),
                     g or (lambda x, a: x[:, 0].copy()), **kw)


@pytest.fixture
def singleton():
    return RegimeSet([[0.0]], [1.0])


@pytest.fixture(scope="session")
def uv_problem():
    return make_catalog_problem("uncertain_vol", {"a_lo": 0.1, "a_hi": 0.3, "M": 5})


@pytest.fixture(scope="session")
def uv_bundle(uv_problem):
    """Moderate bundle for the uncertain-volatility problem (N=20, started at the middle atom)."""
    model, regimes = uv_problem
    return simulate_paths(model, regimes, TimeGrid.uniform(1.0, 20), 1.0, 2, 20000, 123)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
