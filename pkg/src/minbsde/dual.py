"""Change of measure on the regime process and dual value estimates.

A tilt nu >= 1 rescales the intensity of regime jumps from w_j' to
nu * w_j'. Paths are simulated once under the base measure and reweighted by

    L_T = prod_{regime jumps} nu(tau, X, I_{tau-}, a_new)
          * exp(-int_0^T sum_j' (nu(s, X_s, I_s, a_j') - 1) w_j' ds)

with the integral taken by the left-point rule on the time grid and the
state at a jump read at the start of its step (the same freeze as the
forward Euler scheme). Big jumps of X are never tilted.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bsde import ValueEstimate, ValueSurface
from .forward import PathBundle
from .model import ModelSpec, RegimeSet

logger = logging.getLogger(__name__)

ESS_WARN_FRACTION = 0.05


class TiltError(ValueError):
    """Tilt values outside [1, bound]."""


class UnsupportedDriverError(ValueError):
    """Dual estimates need a driver that ignores (y, z, u)."""


@dataclass(frozen=True)
class TiltSpec:
    """Bounded tilt of the regime intensities.

    Either ``table[i, j]`` (constant per transition i -> j) or ``rule(k, x,
    current)`` returning an ``(n, M)`` array of tilts for step k.
    """

    bound: float
    table: np.ndarray | None = None
    rule: Callable | None = None
    label: str = "tilt"

    def __post_init__(self):
        if (self.table is None) == (self.rule is None):
            raise ValueError("give exactly one of table or rule")
        if not (np.isfinite(self.bound) and self.bound >= 1.0):
            raise TiltError("tilt bound must be finite and >= 1")
        if self.table is not None:
            t = np.asarray(self.table, dtype=float)
            if t.ndim != 2 or t.shape[0] != t.shape[1]:
                raise ValueError("tilt table must be square")
            _check_range(t, self.bound)
            object.__setattr__(self, "table", t)

    def values(self, k, x, current) -> np.ndarray:
        """``(n, M)`` tilts for paths at ``(t_k, x)`` currently in ``current``."""
        if self.table is not None:
            return self.table[current]
        nu = np.asarray(self.rule(k, x, current), dtype=float)
        _check_range(nu, self.bound)
        return nu


def _check_range(nu, bound):
    if np.any(~np.isfinite(nu)) or np.any(nu < 1.0) or np.any(nu > bound * (1 + 1e-12)):
        raise TiltError(f"tilt values must lie in [1, {bound}]")


def constant_tilt(regimes: RegimeSet, kappa: float) -> TiltSpec:
    """nu = kappa on every transition."""
    return TiltSpec(max(kappa, 1.0), table=np.full((regimes.size, regimes.size), float(kappa)),
                    label=f"const{kappa:g}")


def toward_atom_tilt(regimes: RegimeSet, target: int, kappa: float) -> TiltSpec:
    """nu = kappa on jumps into atom ``target``, 1 elsewhere."""
    t = np.ones((regimes.size, regimes.size))
    t[:, target] = kappa
    return TiltSpec(max(kappa, 1.0), table=t, label=f"to{target}x{kappa:g}")


@dataclass(frozen=True)
class GirsanovWeight:
    log_weight: float
    jump_term: float
    compensator_term: float

    @property
    def weight(self) -> float:
        return math.exp(self.log_weight)


def _log_weight_terms(bundle: PathBundle, tilt: TiltSpec, regimes: RegimeSet, rows=None):
    """Per-path (jump part, compensator part) of log L_T."""
    grid = bundle.grid
    rows = np.arange(bundle.n_paths) if rows is None else np.asarray(rows)
    n = rows.size
    w = regimes.weights
    comp = np.zeros(n)
    jump = np.zeros(n)

    # regime jumps of the selected rows, with the atom before each jump
    off = bundle.regime_jump_offsets
    counts = off[rows + 1] - off[rows]
    owner = np.repeat(np.arange(n), counts)
    local = np.arange(owner.size) - np.repeat(np.cumsum(counts) - counts, counts)
    idx = np.repeat(off[rows], counts) + local
    atoms = bundle.regime_jump_atom[idx]
    prev = np.empty_like(atoms)
    if atoms.size:
        first = np.r_[True, owner[1:] != owner[:-1]]
        prev[1:] = atoms[:-1]
        prev[first] = bundle.initial_atom
        steps = grid.step_of(bundle.regime_jump_time[idx])
    for k in range(grid.n_steps):
        xk = bundle.x[rows, k]
        cur = bundle.regime_index[rows, k]
        nu = tilt.values(k, xk, cur)
        comp -= grid.dt[k] * ((nu - 1.0) @ w)
        if atoms.size:
            hit = np.flatnonzero(steps == k)
            if hit.size:
                p = owner[hit]
                nu_hit = tilt.values(k, xk[p], prev[hit])
                np.add.at(jump, p, np.log(nu_hit[np.arange(hit.size), atoms[hit]]))
    return jump, comp


def girsanov_weight(bundle: PathBundle, path: int, tilt: TiltSpec,
                    regimes: RegimeSet) -> GirsanovWeight:
    """Doléans-Dade weight L_T of one path."""
    jump, comp = _log_weight_terms(bundle, tilt, regimes, [path])
    return GirsanovWeight(float(jump[0] + comp[0]), float(jump[0]), float(comp[0]))


def girsanov_weights(bundle: PathBundle, tilt: TiltSpec, regimes: RegimeSet,
                     workers: int = 1) -> np.ndarray:
    """L_T for every path of the bundle."""
    chunks = np.array_split(np.arange(bundle.n_paths), max(1, -(-bundle.n_paths // 8192)))

    def run(rows):
        j, c = _log_weight_terms(bundle, tilt, regimes, rows)
        return np.exp(j + c)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, chunks))
    else:
        parts = [run(r) for r in chunks]
    return np.concatenate(parts)


def payoff_samples(bundle: PathBundle, model: ModelSpec, regimes: RegimeSet) -> np.ndarray:
    """g(X_T, I_T) + sum_k f(X_k, I_k) dt along each path."""
    if model.driver.kind != "state_only":
        raise UnsupportedDriverError("dual estimates need a state-only driver")
    N = bundle.grid.n_steps
    X, I = bundle.x, bundle.regime_index
    out = np.empty(bundle.n_paths)
    for j in np.unique(I[:, N]):
        sel = I[:, N] == j
        out[sel] = model.terminal(X[sel, N], regimes.atoms[j])
    f = model.driver.eval
    if f is not None:
        for k in range(N):
            for j in np.unique(I[:, k]):
                sel = I[:, k] == j
                out[sel] += bundle.grid.dt[k] * np.asarray(f(X[sel, k], regimes.atoms[j]))
    return out


def dual_value_estimate(bundle: PathBundle, model: ModelSpec, regimes: RegimeSet,
                        tilt: TiltSpec, workers: int = 1) -> ValueEstimate:
    """Reweighted estimate of E^nu[g(X_T, I_T) + int f dt].

    For a tilt bounded by n + 1 this is a lower estimate of the penalized
    value at level n, hence of the minimal solution.
    """
    h = payoff_samples(bundle, model, regimes)
    L = girsanov_weights(bundle, tilt, regimes, workers)
    s = L * h
    n = bundle.n_paths
    ess = float(L.sum() ** 2 / np.sum(L ** 2))
    if ess < ESS_WARN_FRACTION * n:
        logger.warning("tilt %s: effective sample size %.0f of %d paths", tilt.label, ess, n)
    se = float(s.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return ValueEstimate(float(s.mean()), se, n, f"dual[{tilt.label}]", ess)


def extract_bang_bang_tilt(surface: ValueSurface, n: float) -> TiltSpec:
    """nu*(t_k, x, a_i -> a_j) = n + 1 where v(t_k, x, a_j) > v(t_k, x, a_i), else 1."""
    if surface.is_projection:
        raise ValueError("bang-bang tilt needs a penalized surface with finite n")
    n = float(n)
    if n < 0:
        raise ValueError("penalty level must be >= 0")

    def rule(k, x, current):
        V = surface.values_all(k, x)
        own = V[np.arange(V.shape[0]), current][:, None]
        return np.where(V > own, n + 1.0, 1.0)

    return TiltSpec(n + 1.0, rule=rule, label=f"bangbang[n={n:g}]")


def weight_martingale_check(bundle: PathBundle, tilt: TiltSpec, regimes: RegimeSet) -> float:
    """Sample mean of L_T (should be close to 1)."""
    return float(girsanov_weights(bundle, tilt, regimes).mean())


def export_tilt_csv(tilt: TiltSpec, path) -> None:
    if tilt.table is None:
        raise ValueError("only table tilts can be exported")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["atom_from", "atom_to", "kappa"])
        for i, j in np.ndindex(tilt.table.shape):
            wr.writerow([i, j, repr(float(tilt.table[i, j]))])


def import_tilt_csv(path, regimes: RegimeSet, label: str | None = None) -> TiltSpec:
    """Read an ``atom_from, atom_to, kappa`` table; missing pairs default to 1."""
    table = np.ones((regimes.size, regimes.size))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"atom_from", "atom_to", "kappa"}:
            raise ValueError("tilt CSV needs columns atom_from, atom_to, kappa")
        for row in reader:
            table[int(row["atom_from"]), int(row["atom_to"])] = float(row["kappa"])
    return TiltSpec(float(table.max()), table=table, label=label or "table")
