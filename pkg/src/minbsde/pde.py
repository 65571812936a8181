"""Explicit finite-difference solver for one-dimensional HJB integro-PDEs.

Marches backward

    w(t_k) = w(t_{k+1}) + dt * max_j [ L^{a_j} w(t_{k+1}) + f(x, a_j, ...) ]

with central differences in x. The jump integral is evaluated by linear
interpolation of the current slice at x + beta, extrapolating linearly past
the ends of the grid.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .model import ModelSpec, NumericError, RegimeSet

BOUNDARIES = ("dirichlet_payoff", "linear_extrapolation")


class CFLError(ValueError):
    """Time step too large for the explicit scheme."""


@dataclass(frozen=True)
class FDGrid:
    x_min: float
    x_max: float
    nx: int
    nt: int
    horizon: float
    boundary: str = "linear_extrapolation"

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ValueError("x_min must be < x_max")
        if self.nx < 3:
            raise ValueError("nx must be >= 3")
        if self.nt < 1:
            raise ValueError("nt must be >= 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def dt(self) -> float:
        return self.horizon / self.nt

    @property
    def times(self) -> np.ndarray:
        return self.horizon * (np.arange(self.nt + 1) / self.nt)


@dataclass(frozen=True)
class FDSolution:
    values: np.ndarray      # (nt+1, nx)
    grid: FDGrid
    controls: np.ndarray    # (nt, nx) argmax atom used on each step

    @property
    def x(self) -> np.ndarray:
        return self.grid.x

    @property
    def times(self) -> np.ndarray:
        return self.grid.times


def _stiffness(model: ModelSpec, regimes: RegimeSet, x, dx) -> float:
    """max over nodes and atoms of sigma^2/dx^2 + |b - comp|/dx + 2 * jump rate."""
    pts = x[:, None]
    rate = model.big_jump_measure.total_rate
    worst = 0.0
    for a in regimes.atoms:
        s2 = model.vol_matrix(pts, a)[:, 0, 0] ** 2
        drift = model.drift(pts, a)[:, 0] - model.compensator(pts, a)[:, 0]
        worst = max(worst, float(np.max(s2 / dx ** 2 + np.abs(drift) / dx)) + 2.0 * rate)
    return worst


def make_fd_grid(model: ModelSpec, regimes: RegimeSet, x_min: float, x_max: float, nx: int,
                 boundary: str = "linear_extrapolation", nt: int | None = None,
                 safety: float = 0.9) -> FDGrid:
    """Grid on [x_min, x_max]; ``nt`` defaults to the smallest count meeting the CFL bound."""
    if model.dim_x != 1:
        raise ValueError("finite differences support d = 1 only")
    probe = FDGrid(x_min, x_max, nx, 1, model.horizon, boundary)
    stiff = _stiffness(model, regimes, probe.x, probe.dx)
    if nt is None:
        nt = max(1, math.ceil(model.horizon * stiff / safety))
    grid = FDGrid(x_min, x_max, nx, int(nt), model.horizon, boundary)
    if grid.dt * stiff > 1.0:
        raise CFLError(f"CFL violated: dt * max(sigma^2/dx^2 + |b|/dx + 2 rate) = "
                       f"{grid.dt * stiff:.3g} > 1; use nt >= {math.ceil(model.horizon * stiff)}")
    return grid


def _interp(x, values, q):
    """Piecewise-linear interpolation, extended linearly beyond both ends."""
    i = np.clip(np.searchsorted(x, q) - 1, 0, x.size - 2)
    h = x[i + 1] - x[i]
    return values[i] + (values[i + 1] - values[i]) * (q - x[i]) / h


def _derivatives(x, values):
    dx = x[1] - x[0]
    dw = np.empty_like(values)
    d2w = np.empty_like(values)
    dw[1:-1] = (values[2:] - values[:-2]) / (2 * dx)
    d2w[1:-1] = (values[2:] - 2 * values[1:-1] + values[:-2]) / dx ** 2
    # one-sided at the ends; only used if a caller asks for boundary nodes
    dw[0], dw[-1] = (values[1] - values[0]) / dx, (values[-1] - values[-2]) / dx
    d2w[0], d2w[-1] = d2w[1], d2w[-2]
    return dw, d2w


def _jump_terms(model, x, a, values):
    """(sum_m rho_m [w(x+beta) - w(x)], per-mark increments) at every node."""
    jm = model.big_jump_measure
    pts = x[:, None]
    incs = []
    for mark in jm.marks:
        beta = model.jump_coef(pts, a, mark)[:, 0]
        incs.append(_interp(x, values, x + beta) - values)
    return incs


def apply_generator(model: ModelSpec, x, a, values, node: int | None = None):
    """L^a w at interior nodes (or at the single ``node``).

    Drift and diffusion use central differences; the jump term is
    sum_m rho_m [w(x + beta_m) - w(x) - beta_m w'(x)].
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(values, dtype=float)
    if x.shape != w.shape or x.size < 3:
        raise ValueError("x and values must be 1-d of equal length >= 3")
    a = np.atleast_1d(np.asarray(a, dtype=float))
    dw, d2w = _derivatives(x, w)
    pts = x[:, None]
    b = model.drift(pts, a)[:, 0]
    s = model.vol_matrix(pts, a)[:, 0, 0]
    out = b * dw + 0.5 * s ** 2 * d2w
    jm = model.big_jump_measure
    for mark, rho, inc in zip(jm.marks, jm.weights, _jump_terms(model, x, a, w)):
        beta = model.jump_coef(pts, a, mark)[:, 0]
        out = out + rho * (inc - beta * dw)
    if node is None:
        return out[1:-1]
    if not 0 < node < x.size - 1:
        raise IndexError("apply_generator needs an interior node")
    return float(out[node])


def _driver_term(model, x, a, w):
    drv = model.driver
    if drv.eval is None:
        return 0.0
    pts = x[:, None]
    if drv.kind == "state_only":
        return np.asarray(drv.eval(pts, a), dtype=float)
    dw, _ = _derivatives(x, w)
    z = model.vol_matrix(pts, a)[:, 0, 0] * dw
    u_int = np.zeros_like(x)
    jm = model.big_jump_measure
    if len(jm):
        if drv.jump_kernel is None:
            raise ValueError("full driver with big jumps needs a jump_kernel")
        for mark, rho, inc in zip(jm.marks, jm.weights, _jump_terms(model, x, a, w)):
            u_int = u_int + rho * np.asarray(drv.jump_kernel(pts, mark)).ravel() * inc
    return np.asarray(drv.eval(pts, a, w, z[:, None], u_int), dtype=float)


def fd_solve_hjb(model: ModelSpec, regimes: RegimeSet, grid: FDGrid) -> FDSolution:
    if model.dim_x != 1:
        raise ValueError("finite differences support d = 1 only")
    if not math.isclose(grid.horizon, model.horizon, rel_tol=0, abs_tol=1e-12):
        raise ValueError("grid horizon differs from model horizon")
    stiff = _stiffness(model, regimes, grid.x, grid.dx)
    if grid.dt * stiff > 1.0:
        raise CFLError(f"CFL violated: {grid.dt * stiff:.3g} > 1")
    x = grid.x
    pts = x[:, None]
    payoff = np.max([model.terminal(pts, a) for a in regimes.atoms], axis=0)
    values = np.empty((grid.nt + 1, grid.nx))
    controls = np.zeros((grid.nt, grid.nx), dtype=np.int64)
    values[-1] = payoff
    dt = grid.dt
    for k in range(grid.nt - 1, -1, -1):
        w = values[k + 1]
        cand = np.stack([apply_generator(model, x, a, w) + np.broadcast_to(
            _driver_term(model, x, a, w), x.shape)[1:-1] for a in regimes.atoms])
        best = np.argmax(cand, axis=0)
        new = np.empty_like(w)
        new[1:-1] = w[1:-1] + dt * cand[best, np.arange(best.size)]
        if grid.boundary == "dirichlet_payoff":
            new[0], new[-1] = payoff[0], payoff[-1]
        else:
            new[0] = 2 * new[1] - new[2]
            new[-1] = 2 * new[-2] - new[-3]
        if not np.all(np.isfinite(new)):
            raise NumericError(f"non-finite values at time step {k}")
        values[k] = new
        controls[k, 1:-1] = best
        controls[k, 0], controls[k, -1] = best[0], best[-1]
    return FDSolution(values, grid, controls)


def fd_value_at(solution: FDSolution, t: float, x: float) -> float:
    """Bilinear interpolation in (t, x); exact at nodes."""
    g = solution.grid
    if not (0.0 <= t <= g.horizon and g.x_min <= x <= g.x_max):
        raise ValueError(f"query ({t}, {x}) outside the grid")
    times, xs = g.times, g.x
    k = min(int(np.searchsorted(times, t, side="right")) - 1, g.nt - 1)
    i = min(int(np.searchsorted(xs, x, side="right")) - 1, g.nx - 2)
    s = (t - times[k]) / (times[k + 1] - times[k])
    r = (x - xs[i]) / (xs[i + 1] - xs[i])
    v = solution.values
    lo = (1 - r) * v[k, i] + r * v[k, i + 1]
    hi = (1 - r) * v[k + 1, i] + r * v[k + 1, i + 1]
    return float((1 - s) * lo + s * hi)


def export_fd_csv(solution: FDSolution, path) -> None:
    g = solution.grid
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "x", "value", "argmax_atom"])
        for k, t in enumerate(g.times):
            ctrl = solution.controls[min(k, g.nt - 1)]
            for i, xi in enumerate(g.x):
                wr.writerow([repr(float(t)), repr(float(xi)), repr(float(solution.values[k, i])),
                             int(ctrl[i])])
