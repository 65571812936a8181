import csv
import math

import numpy as np
import pytest
from scipy import stats

from minbsde.forward import (SimulationAborted, TimeGrid, euler_step, path_moment_check,
                             sample_regime_path, simulate_paths, write_paths_csv)
from minbsde.model import ModelSpec, RegimeSet, make_catalog_problem

from conftest import const_model


def geometric(b=0.1, s=0.2):
    return ModelSpec(1, 1.0, lambda x, a: b * x, lambda x, a: (s * x)[:, :, None],
                     lambda x, a: x[:, 0].copy())


def test_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid([0.0, 0.5, 0.5, 1.0])
    with pytest.raises(ValueError):
        TimeGrid([0.1, 1.0])
    g = TimeGrid.uniform(0.7, 30)
    assert g.times[-1] == 0.7 and g.n_steps == 30
    assert np.all(np.diff(g.times) > 0)


def test_step_of_uses_half_open_steps():
    g = TimeGrid.uniform(1.0, 4)
    np.testing.assert_array_equal(g.step_of([1e-9, 0.25, 0.2500001, 1.0]), [0, 0, 1, 3])


def test_singleton_regime_path_is_constant(singleton):
    traj, jumps = sample_regime_path(RegimeSet([[0.3]], [5.0]), TimeGrid.uniform(1.0, 10), 0,
                                     np.random.default_rng(1))
    assert np.all(traj == 0)
    assert all(a == 0 for _, a in jumps)


def test_regime_path_bad_atom():
    with pytest.raises(IndexError):
        sample_regime_path(RegimeSet([[0.0]], [1.0]), TimeGrid.uniform(1.0, 4), 3,
                           np.random.default_rng(0))


def test_regime_path_matches_jump_list():
    regimes = RegimeSet([[0.0], [1.0], [2.0]], [1.0, 2.0, 3.0])
    grid = TimeGrid.uniform(1.0, 50)
    traj, jumps = sample_regime_path(regimes, grid, 1, np.random.default_rng(5))
    times = np.array([t for t, _ in jumps])
    for k, tk in enumerate(grid.times):
        before = [a for t, a in jumps if t <= tk]
        assert traj[k] == (before[-1] if before else 1)
    assert np.all(np.diff(times) >= 0)


@pytest.fixture(scope="module")
def regime_bundle():
    regimes = RegimeSet([[0.0], [1.0]], [0.5, 1.5])
    model = const_model()
    return regimes, simulate_paths(model, regimes, TimeGrid.uniform(1.0, 5), 0.0, 0, 100_000, 9)


def test_poisson_jump_count(regime_bundle):
    _, b = regime_bundle
    counts = np.diff(b.regime_jump_offsets)
    assert abs(counts.mean() - 2.0) <= 3 * math.sqrt(2.0 / b.n_paths)


def test_mark_frequencies(regime_bundle):
    _, b = regime_bundle
    freq = np.bincount(b.regime_jump_atom, minlength=2) / b.regime_jump_atom.size
    se = math.sqrt(0.25 * 0.75 / b.regime_jump_atom.size)
    np.testing.assert_allclose(freq, [0.25, 0.75], atol=4 * se)


def test_index_changes_only_at_recorded_jumps(regime_bundle):
    _, b = regime_bundle
    grid = b.grid
    for i in range(0, 2000):
        jumps = b.regime_jumps(i)
        for k in range(grid.n_steps):
            inside = [a for t, a in jumps if grid.times[k] < t <= grid.times[k + 1]]
            assert b.switched[i, k] == bool(inside)
            if inside:
                assert b.regime_index[i, k + 1] == inside[-1]
            else:
                assert b.regime_index[i, k + 1] == b.regime_index[i, k]


def test_brownian_increment_variance():
    b = simulate_paths(const_model(s=1.0), RegimeSet([[0.0]], [1.0]), TimeGrid([0, 0.1, 0.4, 1.0]),
                       0.0, 0, 100_000, 4)
    for k, dt in enumerate(b.grid.dt):
        v = b.dw[:, k, 0]
        # sample variance of a normal has sd dt * sqrt(2 / n)
        assert abs(v.var() - dt) <= 4 * dt * math.sqrt(2 / v.size)
        assert abs(v.mean()) <= 4 * math.sqrt(dt / v.size)


def test_determinism_across_workers():
    model, regimes = make_catalog_problem("jump_hjb", {})
    grid = TimeGrid.uniform(1.0, 12)
    a = simulate_paths(model, regimes, grid, 1.0, 1, 10_000, 77, workers=1)
    b = simulate_paths(model, regimes, grid, 1.0, 1, 10_000, 77, workers=8)
    c = simulate_paths(model, regimes, grid, 1.0, 1, 10_000, 78)
    for name in ("x", "regime_index", "dw", "switched", "big_jump_counts", "regime_jump_time",
                 "regime_jump_atom", "big_jump_time", "big_jump_mark"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name
    assert not np.array_equal(a.x, c.x)


def test_prefix_stability_over_path_count():
    model, regimes = make_catalog_problem("uncertain_vol", {"a_lo": 0.1, "a_hi": 0.3})
    grid = TimeGrid.uniform(1.0, 4)
    small = simulate_paths(model, regimes, grid, 1.0, 0, 5000, 3)
    large = simulate_paths(model, regimes, grid, 1.0, 0, 9000, 3)
    np.testing.assert_array_equal(small.x[:4096], large.x[:4096])


def test_zero_dynamics_are_constant():
    b = simulate_paths(const_model(), RegimeSet([[0.0]], [1.0]), TimeGrid.uniform(1.0, 10), 1.0,
                       0, 1000, 0)
    assert np.all(b.x == 1.0)


def test_deterministic_drift_exact():
    b = simulate_paths(const_model(b=1.0), RegimeSet([[0.0]], [1.0]), TimeGrid.uniform(1.0, 64),
                       0.5, 0, 100, 0)
    assert np.all(b.x[:, -1, 0] == 1.5)
    b = simulate_paths(const_model(b=1.0, T=0.3), RegimeSet([[0.0]], [1.0]),
                       TimeGrid.uniform(0.3, 50), 0.5, 0, 10, 0)
    np.testing.assert_allclose(b.x[:, -1, 0], 0.8, rtol=0, atol=1e-12)


@pytest.fixture(scope="module")
def geo_bundle():
    return simulate_paths(geometric(), RegimeSet([[0.0]], [1.0]), TimeGrid.uniform(1.0, 100), 1.0,
                          0, 100_000, 21)


def test_geometric_mean(geo_bundle):
    xt = geo_bundle.x[:, -1, 0]
    se = xt.std(ddof=1) / math.sqrt(xt.size)
    assert abs(xt.mean() - math.exp(0.1)) <= 3 * se + 0.01


def test_geometric_second_moment(geo_bundle):
    m2 = path_moment_check(geo_bundle, 2)
    sq = geo_bundle.x[:, -1, 0] ** 2
    se = sq.std(ddof=1) / math.sqrt(sq.size)
    # Euler recursion E[X_{k+1}^2] = E[X_k^2]((1 + b dt)^2 + s^2 dt)
    euler = ((1 + 0.1 / 100) ** 2 + 0.04 / 100) ** 100
    assert abs(m2 - euler) <= 4 * se
    assert abs(euler - math.exp(0.24)) < 0.01


def test_moment_check_constant_paths():
    b = simulate_paths(const_model(), RegimeSet([[0.0]], [1.0]), TimeGrid.uniform(1.0, 3), -2.0,
                       0, 50, 0)
    assert path_moment_check(b, 2) == 4.0
    assert path_moment_check(b, 4) == 16.0
    with pytest.raises(ValueError):
        path_moment_check(b, 3)


def test_regime_marginal_chi_square():
    regimes = RegimeSet([[0.0], [1.0], [2.0], [3.0]], [4.0, 6.0, 2.0, 8.0])
    b = simulate_paths(const_model(), regimes, TimeGrid.uniform(1.0, 4), 0.0, 0, 100_000, 12)
    observed = np.bincount(b.regime_index[:, -1], minlength=4)
    expected = regimes.mark_probabilities * b.n_paths
    assert stats.chisquare(observed, expected).pvalue > 1e-3


def test_compensated_jumps_are_martingale():
    b = simulate_paths(const_model(beta=0.7, rho=2.0), RegimeSet([[0.0]], [1.0]),
                       TimeGrid.uniform(1.0, 10), 1.0, 0, 100_000, 5)
    xt = b.x[:, -1, 0]
    assert abs(xt.mean() - 1.0) <= 3 * xt.std(ddof=1) / math.sqrt(xt.size)
    counts = np.diff(b.big_jump_offsets)
    np.testing.assert_array_equal(counts, b.big_jump_counts.sum(axis=(1, 2)))


def test_euler_step_formula():
    model = const_model(b=0.5, s=2.0, beta=0.3, rho=1.5)
    x = np.array([[1.0], [2.0]])
    out = euler_step(model, x, np.zeros(1), 0.1, np.array([[0.2], [-0.1]]), np.array([[0], [2]]))
    expected = x[:, 0] + 0.05 + 2.0 * np.array([0.2, -0.1]) + (np.array([0, 2]) - 0.15) * 0.3
    np.testing.assert_allclose(out[:, 0], expected, rtol=1e-15)


def test_weak_error_halves():
    model = geometric(b=1.0, s=0.2)
    errors = []
    for n_steps in (5, 10, 20):
        means = [simulate_paths(model, RegimeSet([[0.0]], [1.0]), TimeGrid.uniform(1.0, n_steps),
                                1.0, 0, 50_000, seed).x[:, -1, 0].mean() for seed in (1, 2, 3)]
        errors.append(math.e - np.mean(means))
    ratios = [errors[0] / errors[1], errors[1] / errors[2]]
    assert all(1.5 <= r <= 3.0 for r in ratios), ratios


def test_faulted_paths_dropped_or_abort():
    def blowup(threshold):
        return ModelSpec(1, 1.0, lambda x, a: np.where(x > threshold, np.inf, 0.0),
                         lambda x, a: np.ones((x.shape[0], 1, 1)), lambda x, a: x[:, 0].copy())

    reg = RegimeSet([[0.0]], [1.0])
    grid = TimeGrid.uniform(1.0, 2)
    b = simulate_paths(blowup(2.6 * math.sqrt(0.5)), reg, grid, 0.0, 0, 20_000, 1)
    assert 0 < b.n_faulted <= 200
    assert b.n_paths == 20_000 - b.n_faulted
    assert np.all(np.isfinite(b.x))
    assert b.regime_jump_offsets.size == b.n_paths + 1
    with pytest.raises(SimulationAborted):
        simulate_paths(blowup(0.0), reg, grid, 0.0, 0, 2000, 1)


def test_horizon_mismatch():
    with pytest.raises(ValueError, match="horizon"):
        simulate_paths(const_model(T=2.0), RegimeSet([[0.0]], [1.0]), TimeGrid.uniform(1.0, 4),
                       0.0, 0, 10, 0)


def test_paths_csv(tmp_path):
    model, regimes = make_catalog_problem("uncertain_vol", {"a_lo": 0.1, "a_hi": 0.3})
    b = simulate_paths(model, regimes, TimeGrid.uniform(1.0, 3), 1.0, 2, 4, 0)
    write_paths_csv(b, tmp_path / "paths.csv")
    with open(tmp_path / "paths.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["path", "k", "t", "x_1", "regime_atom"]
    assert len(rows) == 1 + 4 * 4
    assert float(rows[-1][3]) == b.x[3, 3, 0]
    assert int(rows[-1][4]) == b.regime_index[3, 3]
