import csv
import math

import numpy as np
import pytest

from minbsde.bsde import (PROJECTION, StabilityError, StarvationWarning, ValueEstimate,
                          check_a_independence, driver_eval, estimate_z, export_surface_csv,
                          monotonicity_in_n, penalized_backward_sweep, projection_backward_sweep)
from minbsde.forward import TimeGrid, simulate_paths
from minbsde.model import DriverSpec, FiniteJumpMeasure, ModelSpec, RegimeSet, make_catalog_problem
from minbsde.pde import fd_solve_hjb, fd_value_at, make_fd_grid
from minbsde.regression import BasisSpec

from conftest import const_model


def randomized_second_moment(atoms, i0, rate, grid):
    """E[X_T^2] for dX = I dW, X_0 = 1, under the frozen Euler scheme.

    The regime chain jumps at total rate ``rate`` to a uniform atom, so
    E[I_t^2] = m2 + (a_i0^2 - m2) exp(-rate t) with m2 the atom mean of a^2.
    """
    a2 = np.asarray(atoms) ** 2
    m2 = a2.mean()
    t = grid.times[:-1]
    return 1.0 + float(np.sum(grid.dt * (m2 + (a2[i0] - m2) * np.exp(-rate * t))))


class TestDriverEval:
    def test_state_only(self):
        drv = DriverSpec("state_only", lambda x, a: x[:, 0] * a[0])
        assert driver_eval(drv, const_model(), np.array([[2.0]]), np.array([0.5]))[0] == 1.0

    def test_zero_driver(self):
        assert np.all(driver_eval(DriverSpec(), const_model(), np.ones((4, 1)), np.zeros(1)) == 0)

    def test_full_without_big_jumps(self):
        drv = DriverSpec("full", lambda x, a, y, z, u: y + 2 * z[:, 0] + 10 * u)
        out = driver_eval(drv, const_model(), np.ones((2, 1)), np.zeros(1), y=np.array([1.0, 2.0]),
                          z=np.array([[0.5], [1.0]]))
        np.testing.assert_array_equal(out, [2.0, 4.0])

    def test_jump_increment_of_linear_slice(self):
        drv = DriverSpec("full", lambda x, a, y, z, u: u, lambda x, ell: np.ones(x.shape[0]))
        model = const_model(beta=1.0, rho=1.0, driver=drv)
        out = driver_eval(drv, model, np.array([[0.3], [-2.0]]), np.zeros(1),
                          next_value=lambda x: 3 * x[:, 0] + 7)
        np.testing.assert_allclose(out, 3.0, rtol=1e-14)

    def test_missing_kernel(self):
        drv = DriverSpec("full", lambda x, a, y, z, u: u)
        model = const_model(beta=1.0, rho=1.0, driver=drv)
        with pytest.raises(ValueError, match="jump_kernel"):
            driver_eval(drv, model, np.ones((1, 1)), np.zeros(1), next_value=lambda x: x[:, 0])


@pytest.fixture(scope="module")
def linear_bundle():
    model, regimes = make_catalog_problem("linear", {"b": 0, "sigma": 1, "g": "identity"})
    return model, regimes, simulate_paths(model, regimes, TimeGrid.uniform(1.0, 10), 1.0, 0,
                                          20_000, 8)


def test_linear_martingale(linear_bundle):
    model, regimes, b = linear_bundle
    _, est, rep = penalized_backward_sweep(b, model, regimes, BasisSpec(degree=2), 5.0)
    assert abs(est.mean - 1.0) <= 3 * est.stderr
    assert rep.positive_part_integral == 0.0 and rep.max_violation == 0.0
    assert est.scheme == "penalized[n=5]"


@pytest.mark.parametrize("continuation", ["coupled", "partition"])
def test_linear_exactness(linear_bundle, continuation):
    model, regimes, b = linear_bundle
    mc = b.x[:, -1, 0].mean()
    for degree in (0, 1, 3):
        _, est, _ = penalized_backward_sweep(b, model, regimes, BasisSpec(degree=degree), 0.0,
                                             continuation=continuation)
        assert est.mean == pytest.approx(mc, abs=1e-12)


def test_projection_equals_penalized_on_singleton(linear_bundle):
    model, regimes, b = linear_bundle
    s1, e1, _ = penalized_backward_sweep(b, model, regimes, None, 0.0)
    s2, e2 = projection_backward_sweep(b, model, regimes, None)
    assert e1.mean == e2.mean and e1.stderr == e2.stderr
    for k in range(b.grid.n_steps):
        assert np.array_equal(s1.fits[k][0].coefficients, s2.fits[k][0].coefficients)


def test_terminal_slice_is_exact(uv_problem, uv_bundle):
    model, regimes = uv_problem
    surface, _, _ = penalized_backward_sweep(uv_bundle, model, regimes, None, 1.0)
    xT = uv_bundle.x[:, -1]
    V = surface.values_all(uv_bundle.grid.n_steps, xT)
    for j, a in enumerate(regimes.atoms):
        assert np.array_equal(V[:, j], model.terminal(xT, a))
    assert np.all(np.isfinite(surface.values_all(0, np.linspace(-3, 5, 50))))


def test_n_zero_matches_direct_mc(uv_problem, uv_bundle):
    model, regimes = uv_problem
    _, est, _ = penalized_backward_sweep(uv_bundle, model, regimes, None, 0.0)
    g = uv_bundle.x[:, -1, 0] ** 2
    se_mc = g.std(ddof=1) / math.sqrt(g.size)
    assert abs(est.mean - g.mean()) <= 3 * (se_mc + est.stderr)
    oracle = randomized_second_moment(regimes.atoms[:, 0], 2, regimes.total_rate, uv_bundle.grid)
    assert abs(est.mean - oracle) <= 3 * est.stderr
    assert oracle == pytest.approx(1.0418, abs=2e-4)


def test_scheme_ordering(uv_problem, uv_bundle):
    model, regimes = uv_problem
    runs = {}
    reports = {}
    for n in (0.0, 1.0, 10.0, 20.0):
        _, runs[n], reports[n] = penalized_backward_sweep(uv_bundle, model, regimes, None, n)
    _, runs[PROJECTION] = projection_backward_sweep(uv_bundle, model, regimes, None)
    rep = monotonicity_in_n(list(runs.items()))
    assert rep.passed, rep.violations
    proj = runs[PROJECTION]
    for n in (0.0, 1.0, 10.0, 20.0):
        assert runs[n].mean <= proj.mean + 3 * (runs[n].stderr + proj.stderr)
    ints = [reports[n].positive_part_integral for n in (0.0, 1.0, 10.0, 20.0)]
    assert all(b <= a * 1.05 for a, b in zip(ints, ints[1:])), ints
    assert all(np.all(r.profile >= 0) for r in reports.values())
    assert reports[20.0].mean_k_total == pytest.approx(20 * ints[-1])


def test_stability_rule(uv_problem, uv_bundle):
    model, regimes = uv_problem
    with pytest.raises(StabilityError, match=r"n\*dt <= 1"):
        penalized_backward_sweep(uv_bundle, model, regimes, None, 21.0)
    with pytest.raises(ValueError):
        penalized_backward_sweep(uv_bundle, model, regimes, None, -1.0)


def test_controlled_drift_projection():
    model, regimes = make_catalog_problem("controlled_drift", {})
    b = simulate_paths(model, regimes, TimeGrid.uniform(1.0, 20), 1.0, 2, 50_000, 3)
    _, est = projection_backward_sweep(b, model, regimes)
    assert abs(est.mean - 2.0) <= 0.02


def test_coupled_jump_driver_against_fd():
    model, regimes = make_catalog_problem("jump_hjb", {"jump_coupling": 0.5})
    fd = fd_value_at(fd_solve_hjb(model, regimes, make_fd_grid(model, regimes, -4, 6, 300)), 0, 1)
    b = simulate_paths(model, regimes, TimeGrid.uniform(1.0, 20), 1.0, 1, 50_000, 3)
    _, est = projection_backward_sweep(b, model, regimes)
    assert abs(est.mean - fd) <= 0.02


class TestZ:
    def test_linear_value(self):
        model = const_model(s=0.5, g=lambda x, a: 3 * x[:, 0])
        regimes = RegimeSet([[0.0]], [1.0])
        b = simulate_paths(model, regimes, TimeGrid.uniform(1.0, 5), 1.0, 0, 20_000, 2)
        surface, _, _ = penalized_backward_sweep(b, model, regimes, BasisSpec(degree=1), 0.0)
        z = estimate_z(surface, b)
        for k in range(5):
            # v = 3x exactly, so Z = 0.5 * 3 and the centred target is 1.5 dW^2 / dt
            coef = z[k][0][0].coefficients
            assert abs(coef[0] - 1.5) < 4 * 1.5 * math.sqrt(2 / 20_000)

    def test_zero_vol(self):
        model = const_model(s=0.0, b=1.0, g=lambda x, a: x[:, 0] ** 2)
        regimes = RegimeSet([[0.0]], [1.0])
        b = simulate_paths(model, regimes, TimeGrid.uniform(1.0, 4), 0.0, 0, 20_000, 2)
        surface, _, _ = penalized_backward_sweep(b, model, regimes, BasisSpec(degree=1), 0.0)
        z = estimate_z(surface, b)
        for k in range(4):
            assert np.all(np.abs(z[k][0][0].coefficients) < 0.1)

    def test_linear_problem_z_is_one(self, linear_bundle):
        model, regimes, b = linear_bundle
        surface, _, _ = penalized_backward_sweep(b, model, regimes, None, 0.0)
        from dataclasses import replace
        surface = replace(surface, z_fits=estimate_z(surface, b))
        for k in range(b.grid.n_steps):
            zk = surface.z_value(k, b.x[:, k], 0)
            assert abs(zk.mean() - 1.0) < 0.05


class TestAIndependence:
    def test_projection_is_flat(self, uv_problem, uv_bundle):
        model, regimes = uv_problem
        surface, _ = projection_backward_sweep(uv_bundle, model, regimes)
        assert check_a_independence(surface, np.linspace(0, 2, 11)) == 0.0

    def test_duplicated_atoms(self):
        model, _ = make_catalog_problem("uncertain_vol", {"a_lo": 0.1, "a_hi": 0.3})
        regimes = RegimeSet([[0.2], [0.2], [0.2]], [0.3, 0.3, 0.4])
        b = simulate_paths(model, regimes, TimeGrid.uniform(1.0, 10), 1.0, 0, 20_000, 6)
        surface, _, _ = penalized_backward_sweep(b, model, regimes, None, 5.0)
        assert check_a_independence(surface, [[0.8], [1.0], [1.2]]) < 1e-10

    def test_needs_two_interior_atoms(self, linear_bundle):
        model, regimes, b = linear_bundle
        surface, _, _ = penalized_backward_sweep(b, model, regimes, None, 0.0)
        with pytest.raises(ValueError, match="interior"):
            check_a_independence(surface, [[1.0]])

    def test_spread_shrinks_with_penalty(self, uv_problem):
        model, regimes = uv_problem
        spreads = {10.0: [], 100.0: []}
        for seed in (1, 2):
            b = simulate_paths(model, regimes, TimeGrid.uniform(1.0, 100), 1.0, 2, 20_000, seed)
            for n in spreads:
                s, _, _ = penalized_backward_sweep(b, model, regimes, None, n)
                spreads[n].append(check_a_independence(s, [[1.0]]))
        assert np.mean(spreads[100.0]) < np.mean(spreads[10.0])


class TestMonotonicityReport:
    def test_single_entry(self):
        assert monotonicity_in_n([(0.0, ValueEstimate(1.0, 0.1, 10, "x"))]).passed

    def test_flags_decrease(self):
        est = [(0.0, ValueEstimate(1.0, 0.01, 10, "a")), (10.0, ValueEstimate(0.8, 0.01, 10, "b")),
               (PROJECTION, ValueEstimate(1.01, 0.01, 10, "c"))]
        rep = monotonicity_in_n(est)
        assert not rep.passed and rep.violations == [(0.0, 10.0)]

    def test_noise_tolerated(self):
        est = [(0.0, ValueEstimate(1.0, 0.01, 10, "a")), (1.0, ValueEstimate(0.95, 0.01, 10, "b"))]
        assert monotonicity_in_n(est).passed


def test_stderr_scales_with_paths(uv_problem):
    model, regimes = uv_problem
    grid = TimeGrid.uniform(1.0, 10)
    ratios = []
    for seed in (1, 2, 3):
        small = simulate_paths(model, regimes, grid, 1.0, 2, 5000, seed)
        large = simulate_paths(model, regimes, grid, 1.0, 2, 20_000, seed + 100)
        e1 = penalized_backward_sweep(small, model, regimes, None, 1.0)[1]
        e2 = penalized_backward_sweep(large, model, regimes, None, 1.0)[1]
        assert e1.stderr >= 0 and e2.stderr >= 0
        ratios.append(e1.stderr / e2.stderr)
    assert abs(np.mean(ratios) - 2.0) <= 0.6


def test_partition_mode_starvation_merges():
    model, _ = make_catalog_problem("uncertain_vol", {"a_lo": 0.1, "a_hi": 0.3})
    regimes = RegimeSet([[0.1], [0.2], [0.3]], [0.5, 0.5, 1e-6])
    b = simulate_paths(model, regimes, TimeGrid.uniform(1.0, 5), 1.0, 0, 5000, 1)
    with pytest.warns(StarvationWarning, match="merged"):
        _, est, _ = penalized_backward_sweep(b, model, regimes, None, 1.0,
                                             continuation="partition")
    assert math.isfinite(est.mean)


def test_parallel_targets_identical(uv_problem, uv_bundle):
    model, regimes = uv_problem
    a = penalized_backward_sweep(uv_bundle, model, regimes, None, 10.0)[1]
    b = penalized_backward_sweep(uv_bundle, model, regimes, None, 10.0, workers=4)[1]
    assert a == b


def test_surface_export(tmp_path, uv_problem, uv_bundle):
    model, regimes = uv_problem
    surface, _, _ = penalized_backward_sweep(uv_bundle, model, regimes, None, 1.0)
    export_surface_csv(surface, tmp_path / "surface.csv")
    with open(tmp_path / "surface.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["k", "t", "atom", "c0", "c1", "c2"]
    assert len(rows) == 1 + 20 * 5
    k, j = int(rows[7][0]), int(rows[7][2])
    assert float(rows[7][4]) == surface.fits[k][j].coefficients[1]
