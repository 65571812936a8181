"""Problem data for the Markovian regime-switching control setting.

Coefficient callables are vectorized over paths:

    drift(x, a)        x: (n, d), a: (q,)            -> (n, d)
    vol(x, a)          x: (n, d), a: (q,)            -> (n, d, d)
    jump_coef(x, a, l) x: (n, d), a: (q,), l: (l,)   -> (n, d)
    terminal(x, a)     x: (n, d), a: (q,)            -> (n,)

Time-dependent coefficients are handled by carrying time as an extra state
coordinate with zero volatility and unit drift.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


class CatalogError(ValueError):
    """Invalid catalog problem name or parameter."""


class NumericError(ArithmeticError):
    """A model function produced a non-finite value."""


@dataclass(frozen=True)
class FiniteJumpMeasure:
    """Finite-activity jump measure: atoms ``marks[m]`` with intensities ``weights[m]``."""

    marks: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        marks = np.atleast_2d(np.asarray(self.marks, dtype=float))
        if marks.size == 0:
            marks = marks.reshape(0, max(marks.shape[-1], 1))
        weights = np.asarray(self.weights, dtype=float).ravel()
        if marks.shape[0] != weights.shape[0]:
            raise ValueError("jump measure: marks and weights differ in length")
        if np.any(~np.isfinite(weights)) or np.any(weights <= 0):
            raise ValueError("jump measure: weights must be finite and > 0")
        if marks.shape[0] and np.any(np.all(marks == 0, axis=1)):
            raise ValueError("jump measure: the zero mark is excluded")
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "weights", weights)

    @property
    def total_rate(self) -> float:
        return float(self.weights.sum())

    def __len__(self):
        return self.weights.shape[0]


@dataclass(frozen=True)
class RegimeSet:
    """Finite discretization of the control set with atom intensities.

    ``weights[j]`` is the intensity of the regime process jumping to atom j,
    so jump times form a Poisson process of rate ``total_rate`` and marks are
    drawn with probabilities ``weights / total_rate``.
    """

    atoms: np.ndarray
    weights: np.ndarray
    interior_flags: np.ndarray | None = None

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        weights = np.asarray(self.weights, dtype=float).ravel()
        if atoms.shape[0] < 1:
            raise ValueError("regime set: need at least one atom")
        if atoms.shape[0] != weights.shape[0]:
            raise ValueError("regime set: atoms and weights differ in length")
        if np.any(~np.isfinite(weights)) or np.any(weights <= 0):
            raise ValueError("regime set: weights must be finite and > 0")
        flags = self.interior_flags
        flags = np.ones(len(weights), bool) if flags is None else np.asarray(flags, bool)
        if flags.shape != weights.shape:
            raise ValueError("regime set: interior_flags has the wrong length")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "interior_flags", flags)

    @property
    def total_rate(self) -> float:
        return float(self.weights.sum())

    @property
    def mark_probabilities(self) -> np.ndarray:
        return self.weights / self.weights.sum()

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def __len__(self):
        return self.size


@dataclass(frozen=True)
class DriverSpec:
    """Generator of the backward equation.

    ``kind="state_only"``: ``eval(x, a)``, the stochastic control case.
    ``kind="full"``: ``eval(x, a, y, z, u_int)`` where ``u_int`` is the
    scalar reduction of the jump component through ``jump_kernel(x, l) >= 0``.
    """

    kind: str = "state_only"
    eval: Callable | None = None
    jump_kernel: Callable | None = None

    def __post_init__(self):
        if self.kind not in ("state_only", "full"):
            raise ValueError(f"driver kind must be 'state_only' or 'full', got {self.kind!r}")
        if self.kind == "full" and self.eval is None:
            raise ValueError("a full driver needs an eval function")

    @property
    def is_zero(self) -> bool:
        return self.kind == "state_only" and self.eval is None


def _zero_drift(x, a):
    return np.zeros_like(x)


def _zero_jump(x, a, ell):
    return np.zeros_like(x)


@dataclass(frozen=True)
class ModelSpec:
    dim_x: int
    horizon: float
    drift: Callable
    vol: Callable
    terminal: Callable
    jump_coef: Callable = _zero_jump
    big_jump_measure: FiniteJumpMeasure = field(default_factory=FiniteJumpMeasure)
    driver: DriverSpec = field(default_factory=DriverSpec)
    name: str = "custom"

    def __post_init__(self):
        if int(self.dim_x) < 1:
            raise ValueError("dim_x must be a positive integer")
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError("horizon must be finite and > 0")

    def vol_matrix(self, x, a) -> np.ndarray:
        """Volatility as an ``(n, d, d)`` array, accepting scalar-per-path returns too."""
        s = np.asarray(self.vol(x, a), dtype=float)
        n, d = x.shape
        if d == 1 and s.ndim < 3:
            s = s.reshape(-1, 1, 1)
        return np.broadcast_to(s, (n, d, d))

    def compensator(self, x, a) -> np.ndarray:
        """Sum over big-jump atoms of ``rho_m * beta(x, a, l_m)``."""
        out = np.zeros_like(x)
        for mark, rho in zip(self.big_jump_measure.marks, self.big_jump_measure.weights):
            out += rho * self.jump_coef(x, a, mark)
        return out


def terminal_payoff(model: ModelSpec, x, a) -> np.ndarray | float:
    """Evaluate ``g(x, a)``; scalar in, scalar out."""
    scalar = np.ndim(x) <= 1
    xx = np.atleast_1d(np.asarray(x, dtype=float)).reshape(-1, model.dim_x)
    aa = np.atleast_1d(np.asarray(a, dtype=float))
    out = np.asarray(model.terminal(xx, aa), dtype=float)
    if not np.all(np.isfinite(out)):
        raise NumericError("terminal payoff is not finite")
    return float(out[0]) if scalar else out


def sampled_lipschitz(fn, box, atom, n=2000, rng=None) -> float:
    """Fitted Lipschitz constant of ``fn(x, atom)`` in x from random pairs in ``box``.

    ``box`` is ``(lo, hi)`` with arrays of length d. Raises NumericError if
    fn is not finite on the box.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in box)
    x1 = rng.uniform(lo, hi, size=(n, lo.size))
    x2 = rng.uniform(lo, hi, size=(n, lo.size))
    atom = np.atleast_1d(np.asarray(atom, dtype=float))
    f1 = np.asarray(fn(x1, atom), dtype=float).reshape(n, -1)
    f2 = np.asarray(fn(x2, atom), dtype=float).reshape(n, -1)
    if not (np.all(np.isfinite(f1)) and np.all(np.isfinite(f2))):
        raise NumericError("coefficient is not finite on the sampled box")
    dx = np.linalg.norm(x1 - x2, axis=1)
    keep = dx > 1e-12
    return float(np.max(np.linalg.norm(f1 - f2, axis=1)[keep] / dx[keep]))


# ---------------------------------------------------------------------------
# catalog

def _payoff(spec) -> Callable:
    if isinstance(spec, str):
        spec = {"name": spec}
    if not isinstance(spec, Mapping) or "name" not in spec:
        raise CatalogError("g: expected a payoff name or an object with a 'name' field")
    name = spec["name"]
    k = float(spec.get("strike", 1.0))
    if name == "identity":
        return lambda x, a: x[:, 0].copy()
    if name == "square":
        return lambda x, a: x[:, 0] ** 2
    if name == "call":
        return lambda x, a: np.maximum(x[:, 0] - k, 0.0)
    if name == "put":
        return lambda x, a: np.maximum(k - x[:, 0], 0.0)
    if name == "butterfly":
        w = float(spec.get("width", 0.5))
        if w <= 0:
            raise CatalogError("g.width must be > 0")
        return lambda x, a: (np.maximum(x[:, 0] - k + w, 0.0) - 2 * np.maximum(x[:, 0] - k, 0.0)
                             + np.maximum(x[:, 0] - k - w, 0.0))
    if name == "regime_product":
        return lambda x, a: x[:, 0] * a[0]
    raise CatalogError(f"g: unknown payoff {name!r}")


def _num(params, key, default=None, positive=False, integer=False):
    if key not in params:
        if default is None:
            raise CatalogError(f"{key}: required parameter is missing")
        return default
    val = params[key]
    try:
        val = int(val) if integer else float(val)
    except (TypeError, ValueError):
        raise CatalogError(f"{key}: expected a number, got {val!r}") from None
    if integer and val != params[key]:
        raise CatalogError(f"{key}: expected an integer")
    if not np.isfinite(val):
        raise CatalogError(f"{key}: must be finite")
    if positive and val <= 0:
        raise CatalogError(f"{key}: must be > 0")
    return val


def interval_atoms(lo: float, hi: float, m: int) -> np.ndarray:
    """``m`` equally spaced atoms on ``[lo, hi]``.

    Uses ``lo + (hi - lo) * (i / (m - 1))`` so that refining ``m -> 2m - 1``
    reproduces the coarse atoms bit for bit.
    """
    if m == 1:
        return np.array([0.5 * (lo + hi)])
    frac = np.arange(m) / (m - 1)
    return lo + (hi - lo) * frac


def _interval_regimes(params, lo_key="a_lo", hi_key="a_hi", m_key="M", lo=None, hi=None):
    a_lo = _num(params, lo_key, lo)
    a_hi = _num(params, hi_key, hi)
    if a_lo > a_hi:
        raise CatalogError(f"{lo_key} > {hi_key}")
    m = _num(params, m_key, 5, positive=True, integer=True)
    atoms = interval_atoms(a_lo, a_hi, m)
    flags = np.ones(m, bool)
    if m >= 3:
        flags[[0, -1]] = False
    return atoms, flags


def _rate(params, m):
    rate = _num(params, "rate", 1.0, positive=True)
    return np.full(m, rate / m)


def _const_vol(s):
    return lambda x, a: np.full((x.shape[0], 1, 1), s)


CATALOG_FIELDS = {
    "linear": "b=0, sigma=1, g='identity', T=1",
    "controlled_drift": "a_lo=-1, a_hi=1, M=5, sigma=1, rate=1, g='identity', T=1",
    "uncertain_vol": "a_lo, a_hi (required), M=5, rate=1, g='square', T=1",
    "drift_and_vol": "drift_lo=-0.1, drift_hi=0.1, M_drift=3, vol_lo=0.1, vol_hi=0.3, "
                     "M_vol=3, rate=1, g='square', T=1",
    "jump_hjb": "a_lo=0.1, a_hi=0.3, M=3, rate=1, jump_sizes=[0.2], jump_rates=[1.0], "
                "jump_coupling=0, g='square', T=1",
}


def make_catalog_problem(name: str, params: Mapping | None = None) -> tuple[ModelSpec, RegimeSet]:
    """Build one of the named problems from a flat parameter mapping.

    Field names and defaults per problem are listed in ``CATALOG_FIELDS``.
    ``g`` is a payoff name (identity, square, call, put, butterfly,
    regime_product) or an object such as ``{"name": "call", "strike": 1.1}``.
    """
    params = dict(params or {})
    if name not in CATALOG_FIELDS:
        raise CatalogError(f"unknown problem {name!r}; choose from {sorted(CATALOG_FIELDS)}")
    T = _num(params, "T", 1.0, positive=True)

    if name == "linear":
        b = _num(params, "b", 0.0)
        s = _num(params, "sigma", 1.0)
        g = _payoff(params.get("g", "identity"))
        model = ModelSpec(1, T, lambda x, a: np.full_like(x, b), _const_vol(s), g, name=name)
        return model, RegimeSet(np.zeros((1, 1)), np.ones(1), np.ones(1, bool))

    if name == "controlled_drift":
        atoms, flags = _interval_regimes(params, lo=-1.0, hi=1.0)
        s = _num(params, "sigma", 1.0)
        g = _payoff(params.get("g", "identity"))
        model = ModelSpec(1, T, lambda x, a: np.full_like(x, a[0]), _const_vol(s), g, name=name)
        return model, RegimeSet(atoms, _rate(params, len(atoms)), flags)

    if name == "uncertain_vol":
        atoms, flags = _interval_regimes(params)
        g = _payoff(params.get("g", "square"))
        model = ModelSpec(1, T, _zero_drift, lambda x, a: np.full((x.shape[0], 1, 1), a[0]), g,
                          name=name)
        return model, RegimeSet(atoms, _rate(params, len(atoms)), flags)

    if name == "drift_and_vol":
        mu, mu_flags = _interval_regimes(params, "drift_lo", "drift_hi", "M_drift", -0.1, 0.1)
        vol, vol_flags = _interval_regimes(params, "vol_lo", "vol_hi", "M_vol", 0.1, 0.3)
        atoms = np.array([(m, v) for m in mu for v in vol])
        flags = np.array([fm and fv for fm in mu_flags for fv in vol_flags])
        g = _payoff(params.get("g", "square"))
        model = ModelSpec(1, T, lambda x, a: np.full_like(x, a[0]),
                          lambda x, a: np.full((x.shape[0], 1, 1), a[1]), g, name=name)
        return model, RegimeSet(atoms, _rate(params, len(atoms)), flags)

    # jump_hjb
    params.setdefault("a_lo", 0.1)
    params.setdefault("a_hi", 0.3)
    params.setdefault("M", 3)
    atoms, flags = _interval_regimes(params)
    sizes = np.asarray(params.get("jump_sizes", [0.2]), dtype=float)
    rates = np.asarray(params.get("jump_rates", [1.0]), dtype=float)
    if sizes.shape != rates.shape:
        raise CatalogError("jump_sizes and jump_rates differ in length")
    try:
        jumps = FiniteJumpMeasure(sizes[:, None], rates)
    except ValueError as exc:
        raise CatalogError(f"jump_sizes/jump_rates: {exc}") from None
    c = _num(params, "jump_coupling", 0.0)
    if c < 0:
        raise CatalogError("jump_coupling must be >= 0")
    g = _payoff(params.get("g", "square"))
    if c == 0:
        driver = DriverSpec()
    else:
        driver = DriverSpec("full", lambda x, a, y, z, u: c * u,
                            lambda x, ell: np.ones(x.shape[0]))
    model = ModelSpec(1, T, _zero_drift, lambda x, a: np.full((x.shape[0], 1, 1), a[0]), g,
                      jump_coef=lambda x, a, ell: np.full_like(x, ell[0]),
                      big_jump_measure=jumps, driver=driver, name=name)
    return model, RegimeSet(atoms, _rate(params, len(atoms)), flags)
