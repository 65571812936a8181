"""Forward simulation of the regime-switching jump-diffusion (X, I).

Regime jumps are sampled exactly (Poisson times, i.i.d. marks); X follows an
Euler scheme whose coefficients are frozen at the start of each step. A
regime change inside (t_k, t_{k+1}] therefore first affects the coefficients
of step k+1, while the recorded jump list keeps the exact time.

Randomness is drawn per block of ``BLOCK_SIZE`` paths from a Philox stream
keyed by (seed, block index), so the output does not depend on how blocks are
spread over workers.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import ModelSpec, RegimeSet

logger = logging.getLogger(__name__)

BLOCK_SIZE = 4096
FAULT_LIMIT = 0.01


class SimulationAborted(RuntimeError):
    """Too many paths produced non-finite states."""


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("time grid needs at least two nodes")
        if t[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, horizon: float, n_steps: int) -> "TimeGrid":
        t = horizon * (np.arange(n_steps + 1) / n_steps)
        t[-1] = horizon
        return cls(t)

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def step_of(self, t) -> np.ndarray:
        """Index k of the step (t_k, t_{k+1}] containing each time."""
        k = np.searchsorted(self.times, t, side="left") - 1
        return np.clip(k, 0, self.n_steps - 1)


@dataclass(frozen=True)
class PathBundle:
    """Simulated paths on a shared grid.

    Jump lists are stored flat: the jumps of path i occupy
    ``regime_jump_time[regime_jump_offsets[i]:regime_jump_offsets[i+1]]``
    sorted by time, and likewise for big jumps.
    """

    grid: TimeGrid
    x: np.ndarray                 # (n, N+1, d)
    regime_index: np.ndarray      # (n, N+1)
    dw: np.ndarray                # (n, N, d)
    switched: np.ndarray          # (n, N) any regime jump in (t_k, t_{k+1}]
    big_jump_counts: np.ndarray   # (n, N, m)
    regime_jump_offsets: np.ndarray
    regime_jump_time: np.ndarray
    regime_jump_atom: np.ndarray
    big_jump_offsets: np.ndarray
    big_jump_time: np.ndarray
    big_jump_mark: np.ndarray
    seed: int
    initial_atom: int
    n_faulted: int = 0

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[2]

    def regime_jumps(self, i: int) -> list[tuple[float, int]]:
        s, e = self.regime_jump_offsets[i], self.regime_jump_offsets[i + 1]
        return list(zip(self.regime_jump_time[s:e].tolist(), self.regime_jump_atom[s:e].tolist()))

    def big_jumps(self, i: int) -> list[tuple[float, int]]:
        s, e = self.big_jump_offsets[i], self.big_jump_offsets[i + 1]
        return list(zip(self.big_jump_time[s:e].tolist(), self.big_jump_mark[s:e].tolist()))


def _offsets(counts):
    off = np.zeros(counts.size + 1, dtype=np.int64)
    np.cumsum(counts, out=off[1:])
    return off


def _poisson_marks(rng, n, rate, probs, horizon):
    """Counts, sorted-per-path times and marks of a marked Poisson process on [0, T]."""
    counts = rng.poisson(rate * horizon, size=n) if rate > 0 else np.zeros(n, dtype=np.int64)
    total = int(counts.sum())
    times = rng.uniform(0.0, horizon, size=total)
    marks = rng.choice(len(probs), size=total, p=probs) if total else np.zeros(0, dtype=np.int64)
    owner = np.repeat(np.arange(n), counts)
    order = np.lexsort((times, owner))
    return counts, times[order], marks[order], owner[order]


def _regime_grid(grid: TimeGrid, n, initial_atom, times, atoms, owner):
    """Atom in force at each node (right-continuous) and per-step switch flags."""
    n_nodes = grid.n_steps + 1
    node = grid.step_of(times) + 1
    events = np.full((n, n_nodes), -1, dtype=np.int64)
    if times.size:
        key = owner * n_nodes + node
        # keep the last jump landing in each (path, node) cell
        last = np.r_[key[1:] != key[:-1], True]
        events.ravel()[key[last]] = atoms[last]
    events[:, 0] = initial_atom
    idx = np.where(events >= 0, np.arange(n_nodes), 0)
    np.maximum.accumulate(idx, axis=1, out=idx)
    traj = np.take_along_axis(events, idx, axis=1)
    switched = np.zeros((n, grid.n_steps), bool)
    if times.size:
        switched[owner, node - 1] = True
    return traj, switched


def sample_regime_path(regimes: RegimeSet, grid: TimeGrid, initial_atom: int,
                       rng: np.random.Generator):
    """One regime path: (atom index at every node, list of (time, new atom))."""
    if not 0 <= initial_atom < regimes.size:
        raise IndexError(f"initial atom {initial_atom} out of range")
    _, times, atoms, owner = _poisson_marks(rng, 1, regimes.total_rate,
                                            regimes.mark_probabilities, grid.horizon)
    traj, _ = _regime_grid(grid, 1, initial_atom, times, atoms, owner)
    return traj[0], list(zip(times.tolist(), atoms.tolist()))


def euler_step(model: ModelSpec, x, atom, dt, dw, jump_counts=None):
    """One frozen-coefficient Euler step from ``x`` under regime ``atom``.

    ``jump_counts`` is ``(n, m)``: the number of big jumps of each mark in
    the step. The compensator ``dt * sum_m rho_m beta`` is subtracted.
    """
    sig = model.vol_matrix(x, atom)
    out = x + model.drift(x, atom) * dt + np.einsum("nij,nj->ni", sig, dw)
    jm = model.big_jump_measure
    if len(jm):
        for m, (mark, rho) in enumerate(zip(jm.marks, jm.weights)):
            beta = model.jump_coef(x, atom, mark)
            out = out + (jump_counts[:, m, None] - rho * dt) * beta
    return out


def _block_rng(seed: int, block: int) -> np.random.Generator:
    key = (int(seed) % 2**64) * 2**64 + block
    return np.random.Generator(np.random.Philox(key=key))


def _simulate_block(model, regimes, grid, x0, i0, n, seed, block):
    rng = _block_rng(seed, block)
    N, d = grid.n_steps, model.dim_x
    dt = grid.dt
    dw = rng.standard_normal((n, N, d)) * np.sqrt(dt)[None, :, None]
    r_counts, r_times, r_atoms, r_owner = _poisson_marks(
        rng, n, regimes.total_rate, regimes.mark_probabilities, grid.horizon)
    jm = model.big_jump_measure
    n_marks = len(jm)
    if n_marks:
        b_counts, b_times, b_marks, b_owner = _poisson_marks(
            rng, n, jm.total_rate, jm.weights / jm.total_rate, grid.horizon)
    else:
        b_counts = np.zeros(n, dtype=np.int64)
        b_times = np.zeros(0)
        b_marks = b_owner = np.zeros(0, dtype=np.int64)
    traj, switched = _regime_grid(grid, n, i0, r_times, r_atoms, r_owner)
    jump_counts = np.zeros((n, N, n_marks), dtype=np.int64)
    if b_times.size:
        np.add.at(jump_counts, (b_owner, grid.step_of(b_times), b_marks), 1)

    x = np.empty((n, N + 1, d))
    x[:, 0] = x0
    with np.errstate(all="ignore"):
        for k in range(N):
            cur = x[:, k]
            nxt = x[:, k + 1]
            for j in np.unique(traj[:, k]):
                sel = traj[:, k] == j
                nxt[sel] = euler_step(model, cur[sel], regimes.atoms[j], dt[k], dw[sel, k],
                                      jump_counts[sel, k])
    return dict(x=x, traj=traj, dw=dw, switched=switched, jump_counts=jump_counts,
                r=(r_counts, r_times, r_atoms), b=(b_counts, b_times, b_marks))


def simulate_paths(model: ModelSpec, regimes: RegimeSet, grid: TimeGrid, x0, i0: int,
                   n_paths: int, seed: int, workers: int = 1) -> PathBundle:
    """Simulate ``n_paths`` paths of (X, I) started at ``(x0, atom i0)``.

    Paths with non-finite states are dropped and counted in ``n_faulted``;
    more than 1% faulted paths raises SimulationAborted.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if not np.isclose(grid.horizon, model.horizon, rtol=0, atol=1e-12):
        raise ValueError("grid horizon differs from model horizon")
    if not 0 <= i0 < regimes.size:
        raise IndexError(f"initial atom {i0} out of range")
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (model.dim_x,))
    sizes = [min(BLOCK_SIZE, n_paths - s) for s in range(0, n_paths, BLOCK_SIZE)]

    def run(b):
        return _simulate_block(model, regimes, grid, x0, i0, sizes[b], seed, b)

    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, range(len(sizes))))
    else:
        parts = [run(b) for b in range(len(sizes))]

    x = np.concatenate([p["x"] for p in parts])
    ok = np.all(np.isfinite(x), axis=(1, 2))
    n_bad = int((~ok).sum())
    if n_bad > FAULT_LIMIT * n_paths:
        raise SimulationAborted(f"{n_bad} of {n_paths} paths produced non-finite states")
    if n_bad:
        logger.warning("dropped %d faulted paths", n_bad)

    def cat(key):
        return np.concatenate([p[key] for p in parts])

    def flat(key):
        counts = np.concatenate([p[key][0] for p in parts])
        times = np.concatenate([p[key][1] for p in parts])
        marks = np.concatenate([p[key][2] for p in parts])
        owner_ok = np.repeat(ok, counts)
        return _offsets(counts[ok]), times[owner_ok], marks[owner_ok]

    r_off, r_t, r_a = flat("r")
    b_off, b_t, b_m = flat("b")
    return PathBundle(grid=grid, x=x[ok], regime_index=cat("traj")[ok], dw=cat("dw")[ok],
                      switched=cat("switched")[ok], big_jump_counts=cat("jump_counts")[ok],
                      regime_jump_offsets=r_off, regime_jump_time=r_t, regime_jump_atom=r_a,
                      big_jump_offsets=b_off, big_jump_time=b_t, big_jump_mark=b_m,
                      seed=int(seed), initial_atom=int(i0), n_faulted=n_bad)


def path_moment_check(bundle: PathBundle, p: int = 2) -> float:
    """Largest empirical ``E|X_t|^p`` over grid times."""
    if p not in (2, 4):
        raise ValueError("p must be 2 or 4")
    if bundle.n_paths == 0:
        raise ValueError("empty bundle")
    norms = np.linalg.norm(bundle.x, axis=2)
    return float(np.max(np.mean(norms ** p, axis=0)))


def write_paths_csv(bundle: PathBundle, path) -> None:
    n, n_nodes, d = bundle.x.shape
    t = bundle.grid.times
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "k", "t"] + [f"x_{i + 1}" for i in range(d)] + ["regime_atom"])
        for i in range(n):
            for k in range(n_nodes):
                w.writerow([i, k, repr(float(t[k]))] + [repr(float(v)) for v in bundle.x[i, k]]
                           + [int(bundle.regime_index[i, k])])
