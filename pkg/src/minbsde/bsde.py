"""Backward regression sweeps for the penalized and projected schemes.

At step k and regime atom j the value is

    v(t_k, x, a_j) = E[v(t_{k+1}, X_{k+1}, I_{k+1}) | X_k = x, I_k = a_j]
                     + dt * f(x, a_j, ...)
                     + dt * n * sum_j' w_j' [v(t_{k+1}, x, a_j') - v(t_{k+1}, x, a_j)]^+

(penalized, explicit in the penalty) or, for the projection scheme, the
maximum over atoms of the first two terms. The terminal slice is g itself.

Two ways to estimate the conditional expectation for atom j:

``coupled`` (default)
    Every path contributes. The one Euler step from X_k is redone with the
    coefficients of a_j using the path's own Brownian increment and big-jump
    counts; the regime at t_{k+1} is the path's new atom if it switched
    during the step and a_j otherwise. Regime jumps do not depend on the
    current regime, so this is an exact draw from the conditional law.
``partition``
    Only paths sitting in a_j at t_k are used. Atoms with fewer paths than
    basis functions borrow the nearest populated atom's paths.
"""
from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .forward import PathBundle, TimeGrid, euler_step
from .model import DriverSpec, ModelSpec, RegimeSet
from .regression import BasisSpec, design_matrix, ls_fit, ls_fit_many, predict

PROJECTION = "projection"


class StabilityError(ValueError):
    """Explicit penalty update requested with n * dt > 1."""


class StarvationWarning(UserWarning):
    """A regime atom had too few paths and was merged with a neighbour."""


@dataclass(frozen=True)
class ValueEstimate:
    mean: float
    stderr: float
    n_paths: int
    scheme: str
    ess: float | None = None


@dataclass(frozen=True)
class ConstraintReport:
    """Empirical size of the positive part of the regime-jump component R."""

    positive_part_integral: float
    max_violation: float
    profile: np.ndarray
    penalty: float

    @property
    def mean_k_total(self) -> float:
        """Mean accumulated penalty process K_T = n * E int sum_j w_j [R]^+ dt."""
        return self.penalty * self.positive_part_integral


@dataclass(frozen=True)
class ValueSurface:
    """Fitted value function on every (time step, atom).

    ``fits[k][j]`` for k < N. In the projection scheme these are the
    per-atom candidates and the value at any atom is their maximum.
    """

    model: ModelSpec
    regimes: RegimeSet
    grid: TimeGrid
    bases: list
    fits: list
    penalty_level: float | str
    z_fits: list | None = None

    @property
    def is_projection(self) -> bool:
        return self.penalty_level == PROJECTION

    def candidates(self, k, x) -> np.ndarray:
        D = design_matrix(self.bases[k], x)
        return np.column_stack([D @ f.coefficients for f in self.fits[k]])

    def values_all(self, k, x) -> np.ndarray:
        """``(n, M)`` array of v(t_k, x_i, a_j)."""
        x = _as2d(x, self.model.dim_x)
        if k == self.grid.n_steps:
            return np.column_stack([self.model.terminal(x, a) for a in self.regimes.atoms])
        c = self.candidates(k, x)
        if self.is_projection:
            return np.repeat(c.max(axis=1, keepdims=True), c.shape[1], axis=1)
        return c

    def value(self, k, x, j) -> np.ndarray:
        x = _as2d(x, self.model.dim_x)
        if k == self.grid.n_steps:
            return np.asarray(self.model.terminal(x, self.regimes.atoms[j]), dtype=float)
        if self.is_projection:
            return self.candidates(k, x).max(axis=1)
        return predict(self.fits[k][j], self.bases[k], x)

    def value_at(self, k, x, atoms) -> np.ndarray:
        """v(t_k, x_i, a_{atoms[i]}) for per-path atom indices."""
        x = _as2d(x, self.model.dim_x)
        if self.is_projection and k < self.grid.n_steps:
            return self.candidates(k, x).max(axis=1)
        out = np.empty(x.shape[0])
        for j in np.unique(atoms):
            sel = atoms == j
            out[sel] = self.value(k, x[sel], j)
        return out

    def slice(self, k, j):
        """``x -> v(t_k, x, a_j)``."""
        return lambda x: self.value(k, x, j)

    def z_value(self, k, x, j) -> np.ndarray:
        if self.z_fits is None:
            raise ValueError("surface has no Z fits; run estimate_z first")
        x = _as2d(x, self.model.dim_x)
        return np.column_stack([predict(f, self.bases[k], x) for f in self.z_fits[k][j]])


def _as2d(x, d):
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, d)


def driver_eval(driver: DriverSpec, model: ModelSpec, x, a, y=None, z=None,
                next_value=None) -> np.ndarray:
    """Generator value at (x, a); for full drivers the jump argument is

    u_int = sum_m rho_m delta(x, l_m) [v(x + beta(x, a, l_m)) - v(x)]

    with ``next_value`` the value slice at the next time step and atom a.
    """
    x = _as2d(x, model.dim_x)
    n = x.shape[0]
    if driver.kind == "state_only":
        if driver.eval is None:
            return np.zeros(n)
        return np.asarray(driver.eval(x, a), dtype=float)
    jm = model.big_jump_measure
    u = np.zeros(n)
    if len(jm):
        if driver.jump_kernel is None:
            raise ValueError("full driver with big jumps needs a jump_kernel")
        if next_value is None:
            raise ValueError("full driver with big jumps needs the next value slice")
        base = next_value(x)
        for mark, rho in zip(jm.marks, jm.weights):
            moved = next_value(x + model.jump_coef(x, a, mark))
            u += rho * np.asarray(driver.jump_kernel(x, mark)) * (moved - base)
    y = np.zeros(n) if y is None else y
    z = np.zeros_like(x) if z is None else z
    return np.asarray(driver.eval(x, a, y, z, u), dtype=float)


def _positive_gaps(V, own):
    """``(n, M)`` array of [V[:, j'] - V[i, own_i]]^+."""
    return np.maximum(V - V[np.arange(V.shape[0]), own][:, None], 0.0)


def _rows_for_atom(bundle, k, j, regimes, min_rows, mode):
    if mode == "coupled":
        return None, j
    Ik = bundle.regime_index[:, k]
    counts = np.bincount(Ik, minlength=regimes.size)
    if counts[j] >= min_rows:
        return np.flatnonzero(Ik == j), j
    populated = np.flatnonzero(counts >= min_rows)
    if populated.size == 0:
        raise RuntimeError(f"step {k}: no atom has {min_rows} paths")
    dist = np.linalg.norm(regimes.atoms[populated] - regimes.atoms[j], axis=1)
    src = int(populated[np.argmin(dist)])
    warnings.warn(f"step {k}: atom {j} has {counts[j]} paths, merged with atom {src}",
                  StarvationWarning, stacklevel=3)
    return np.flatnonzero(Ik == src), src


class _Step:
    """Contiguous copies of the step-k slices of a bundle."""

    def __init__(self, bundle, k):
        self.k = k
        self.dt = bundle.grid.dt[k]
        self.x = np.ascontiguousarray(bundle.x[:, k])
        self.x_next = np.ascontiguousarray(bundle.x[:, k + 1])
        self.atom = bundle.regime_index[:, k]
        self.atom_next = bundle.regime_index[:, k + 1]
        self.dw = np.ascontiguousarray(bundle.dw[:, k])
        self.counts = np.ascontiguousarray(bundle.big_jump_counts[:, k])
        self.switched = bundle.switched[:, k]


def _next_state(model, regimes, step, src, rows):
    """Next state and atom of the paths in ``rows`` given I_k = a_src.

    ``rows=None`` is the coupled mode: all paths, one step redone under a_src.
    """
    if rows is not None:
        return step.x_next[rows], step.atom_next[rows]
    own = step.atom == src
    if own.all():
        x_next = step.x_next
    else:
        redo = euler_step(model, step.x, regimes.atoms[src], step.dt, step.dw, step.counts)
        x_next = np.where(own[:, None], step.x_next, redo)
    atom_next = np.where(step.switched, step.atom_next, src)
    return x_next, atom_next


def _next_values(surface, k, x_next, atom_next, j):
    """v(t_k, x_next, atom_next) where most paths have atom_next == j."""
    out = surface.value(k, x_next, j)
    moved = atom_next != j
    if moved.any() and not (surface.is_projection and k < surface.grid.n_steps):
        out[moved] = surface.value_at(k, x_next[moved], atom_next[moved])
    return out


def _check_bundle(bundle, model, regimes):
    if bundle.n_paths == 0:
        raise RuntimeError("bundle has no valid paths")
    if bundle.x.shape[2] != model.dim_x:
        raise ValueError("bundle dimension differs from model")
    if bundle.regime_index.max() >= regimes.size:
        raise ValueError("bundle uses atoms outside the regime set")


def _sweep(bundle, model, regimes, basis, penalty, continuation, workers, ridge):
    _check_bundle(bundle, model, regimes)
    if continuation not in ("coupled", "partition"):
        raise ValueError(f"unknown continuation mode {continuation!r}")
    projection = penalty == PROJECTION
    grid = bundle.grid
    N, M = grid.n_steps, regimes.size
    if not projection:
        penalty = float(penalty)
        if penalty < 0:
            raise ValueError("penalty must be >= 0")
        if penalty * grid.dt.max() > 1.0 + 1e-12:
            raise StabilityError(f"stability rule n*dt <= 1 violated: n={penalty}, "
                                 f"dt={grid.dt.max():.6g}")
    driver = model.driver
    full = driver.kind == "full"
    w = regimes.weights
    X, I = bundle.x, bundle.regime_index
    n_paths = bundle.n_paths
    min_rows = basis.size(model.dim_x)

    surface = ValueSurface(model, regimes, grid, [None] * N, [None] * N,
                           PROJECTION if projection else penalty)
    zeta = surface.value_at(N, X[:, N], I[:, N])
    profile = np.zeros(N)
    max_violation = 0.0

    for k in range(N - 1, -1, -1):
        step = _Step(bundle, k)
        dt, xk = step.dt, step.x
        basis_k = basis.with_box(xk)
        surface.bases[k] = basis_k
        D = design_matrix(basis_k, xk)
        V_next = surface.values_all(k + 1, xk)

        def atom_target(j):
            rows, src = _rows_for_atom(bundle, k, j, regimes, min_rows, continuation)
            x_next, atom_next = _next_state(model, regimes, step, src, rows)
            y_next = _next_values(surface, k + 1, x_next, atom_next, src)
            Dj = D if rows is None else D[rows]
            xs = xk if rows is None else xk[rows]
            extra = {}
            if full:
                dw = step.dw if rows is None else step.dw[rows]
                c_fit = ls_fit(Dj, y_next, ridge)
                resid = y_next - Dj @ c_fit.coefficients
                z_fit = ls_fit_many(Dj, resid[:, None] * dw / dt, ridge)
                extra = {"c": c_fit, "z": z_fit}
                f = driver_eval(driver, model, xs, regimes.atoms[j], Dj @ c_fit.coefficients,
                                np.column_stack([Dj @ zf.coefficients for zf in z_fit]),
                                surface.slice(k + 1, j))
            else:
                f = driver_eval(driver, model, xs, regimes.atoms[j])
            target = y_next + dt * f
            if not projection and penalty > 0:
                Vj = V_next if rows is None else V_next[rows]
                target = target + dt * penalty * (np.maximum(Vj - Vj[:, [j]], 0.0) @ w)
            return rows, target, extra

        if workers > 1 and M > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(atom_target, range(M)))
        else:
            results = [atom_target(j) for j in range(M)]
        if continuation == "coupled":
            surface.fits[k] = ls_fit_many(D, np.column_stack([r[1] for r in results]), ridge)
        else:
            surface.fits[k] = [ls_fit(D[r[0]], r[1], ridge) for r in results]
        results = [(None, r[2]) for r in results]

        # pathwise increments: driver and penalty (or projection push-up) along each path
        Ik = step.atom
        f_path = np.zeros(n_paths)
        for j in np.unique(Ik):
            sel = Ik == j
            if full:
                ex = results[j][1]
                Ds = D[sel]
                f_path[sel] = driver_eval(driver, model, xk[sel], regimes.atoms[j],
                                          Ds @ ex["c"].coefficients,
                                          np.column_stack([Ds @ zf.coefficients for zf in ex["z"]]),
                                          surface.slice(k + 1, j))
            else:
                f_path[sel] = driver_eval(driver, model, xk[sel], regimes.atoms[j])
        gaps = _positive_gaps(V_next, Ik)
        pos = gaps @ w
        profile[k] = pos.mean()
        max_violation = max(max_violation, float(gaps.max()))
        if projection:
            C = np.column_stack([D @ f.coefficients for f in surface.fits[k]])
            push = C.max(axis=1) - C[np.arange(n_paths), Ik]
            zeta = zeta + dt * f_path + push
        else:
            zeta = zeta + dt * (f_path + penalty * pos)

    i0 = bundle.initial_atom
    v0 = surface.value(0, X[:, 0], i0)
    est = ValueEstimate(float(v0.mean()), float(zeta.std(ddof=1) / math.sqrt(n_paths))
                        if n_paths > 1 else 0.0, n_paths,
                        PROJECTION if projection else f"penalized[n={penalty:g}]")
    report = ConstraintReport(float(np.sum(profile * grid.dt)), max_violation, profile,
                              math.inf if projection else penalty)
    return surface, est, report


def penalized_backward_sweep(bundle: PathBundle, model: ModelSpec, regimes: RegimeSet,
                             basis: BasisSpec | None = None, n: float = 0.0, *,
                             continuation: str = "coupled", workers: int = 1,
                             ridge: float = 0.0):
    """Penalized scheme at penalty level ``n``.

    Returns ``(surface, estimate, constraint_report)``. The estimate is the
    fitted v(0, x0, a_i0) averaged over paths; its standard error comes from
    the pathwise sum g(X_T, I_T) + sum_k dt (f + n sum_j w_j [R]^+), whose
    mean the scheme reproduces.
    """
    basis = BasisSpec() if basis is None else basis
    return _sweep(bundle, model, regimes, basis, n, continuation, workers, ridge)


def projection_backward_sweep(bundle: PathBundle, model: ModelSpec, regimes: RegimeSet,
                              basis: BasisSpec | None = None, *,
                              continuation: str = "coupled", workers: int = 1,
                              ridge: float = 0.0):
    """Limit scheme: the value at every atom is the max over atoms of the
    continuation plus driver. Returns ``(surface, estimate)``."""
    basis = BasisSpec() if basis is None else basis
    surface, est, _ = _sweep(bundle, model, regimes, basis, PROJECTION, continuation, workers,
                             ridge)
    return surface, est


def estimate_z(surface: ValueSurface, bundle: PathBundle, *, continuation: str = "coupled",
               ridge: float = 0.0) -> list:
    """Regress [v(t_{k+1}, X_{k+1}, I_{k+1}) - v(t_k, X_k, a_j)] dW_k / dt on the step-k basis.

    Returns ``z_fits[k][j]``, a list of d fits per (step, atom); attach with
    ``dataclasses.replace(surface, z_fits=...)``.
    """
    model, regimes = surface.model, surface.regimes
    N = surface.grid.n_steps
    min_rows = surface.bases[0].size(model.dim_x)
    out = []
    for k in range(N):
        step = _Step(bundle, k)
        D = design_matrix(surface.bases[k], step.x)
        row = []
        for j in range(regimes.size):
            rows, src = _rows_for_atom(bundle, k, j, regimes, min_rows, continuation)
            x_next, atom_next = _next_state(model, regimes, step, src, rows)
            y = _next_values(surface, k + 1, x_next, atom_next, src)
            Dj = D if rows is None else D[rows]
            dw = step.dw if rows is None else step.dw[rows]
            # any function of X_k is uncorrelated with dW_k; removing the fit cuts the variance
            y = y - Dj @ surface.fits[k][j].coefficients
            row.append(ls_fit_many(Dj, y[:, None] * dw / step.dt, ridge))
        out.append(row)
    return out


def check_a_independence(surface: ValueSurface, probe_points) -> float:
    """Largest spread of v(0, x, .) over interior atoms at the probe points,
    relative to ``1 + max |v|``."""
    interior = np.flatnonzero(surface.regimes.interior_flags)
    if interior.size < 2:
        raise ValueError("need at least two interior atoms")
    V = surface.values_all(0, probe_points)[:, interior]
    spread = V.max(axis=1) - V.min(axis=1)
    return float(np.max(spread / (1.0 + np.abs(V).max())))


@dataclass
class MonotonicityReport:
    passed: bool
    violations: list = field(default_factory=list)


def _level(n):
    return math.inf if n == PROJECTION else float(n)


def monotonicity_in_n(estimates) -> MonotonicityReport:
    """Flag pairs n < n' whose means drop by more than 3 (se_n + se_n')."""
    items = sorted(((_level(n), e) for n, e in estimates), key=lambda t: t[0])
    bad = []
    for a in range(len(items)):
        for b in range(a + 1, len(items)):
            (n1, e1), (n2, e2) = items[a], items[b]
            if n1 < n2 and e2.mean < e1.mean - 3.0 * (e1.stderr + e2.stderr):
                bad.append((n1, n2))
    return MonotonicityReport(not bad, bad)


def export_surface_csv(surface: ValueSurface, path) -> None:
    """Rows ``k, t, atom, c0, c1, ...`` (candidates for projection surfaces)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        width = max(f.coefficients.size for row in surface.fits for f in row)
        wr.writerow(["k", "t", "atom"] + [f"c{i}" for i in range(width)])
        for k, row in enumerate(surface.fits):
            for j, f in enumerate(row):
                wr.writerow([k, repr(float(surface.grid.times[k])), j]
                            + [repr(float(c)) for c in f.coefficients])
